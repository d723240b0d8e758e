#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "convemo/matrix.hpp"

namespace convemo {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UtteranceRecord {
    std::vector<double> acoustic;
    std::vector<double> lexical;
    std::vector<double> speaker_emb;
    std::optional<std::string> speaker_tag;
    int label = 0;
};

struct Dialog {
    std::string id;
    std::vector<UtteranceRecord> utterances;
};

struct DatasetMeta {
    int d_a = 0;
    int d_t = 0;
    int d_s = 0;
    int num_classes = 0;
    std::vector<std::string> class_names;
    std::string split_tag;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Dialog> dialogs;

    size_t total_utterances() const {
        size_t n = 0;
        for (const auto& d : dialogs) n += d.utterances.size();
        return n;
    }
};

namespace detail {
inline std::vector<double> read_vec(const nlohmann::json& j, const char* key,
                                    int expected_dim, const std::string& dialog_id) {
    const auto& arr = j.at(key);
    if (!arr.is_array())
        throw DataError("dialog " + dialog_id + ": field '" + key + "' is not an array");
    std::vector<double> v = arr.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != expected_dim)
        throw DataError("dialog " + dialog_id + ": field '" + key + "' has dim " +
                        std::to_string(v.size()) + ", expected " + std::to_string(expected_dim));
    for (double x : v)
        if (!std::isfinite(x))
            throw DataError("dialog " + dialog_id + ": non-finite value in '" + key + "'");
    return v;
}
}  // namespace detail

// JSON-lines format. Line 1 is the meta object, each further line one dialog.
inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file: " + path);

    std::string line;
    int lineno = 0;
    Dataset ds;
    bool have_meta = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
        }
        try {
            if (!have_meta) {
                ds.meta.d_a = j.at("d_a").get<int>();
                ds.meta.d_t = j.at("d_t").get<int>();
                ds.meta.d_s = j.at("d_s").get<int>();
                ds.meta.num_classes = j.at("c").get<int>();
                if (j.contains("classes"))
                    ds.meta.class_names = j["classes"].get<std::vector<std::string>>();
                if (j.contains("split"))
                    ds.meta.split_tag = j["split"].get<std::string>();
                have_meta = true;
                continue;
            }
            Dialog dlg;
            dlg.id = j.at("id").get<std::string>();
            for (const auto& ju : j.at("utts")) {
                UtteranceRecord u;
                u.acoustic = detail::read_vec(ju, "a", ds.meta.d_a, dlg.id);
                u.lexical = detail::read_vec(ju, "t", ds.meta.d_t, dlg.id);
                u.speaker_emb = detail::read_vec(ju, "s", ds.meta.d_s, dlg.id);
                if (ju.contains("spk") && !ju["spk"].is_null())
                    u.speaker_tag = ju["spk"].get<std::string>();
                u.label = ju.at("y").get<int>();
                if (u.label < 0 || u.label >= ds.meta.num_classes)
                    throw DataError("dialog " + dlg.id + ": label " + std::to_string(u.label) +
                                    " out of range for c=" + std::to_string(ds.meta.num_classes));
                dlg.utterances.push_back(std::move(u));
            }
            if (dlg.utterances.empty())
                throw DataError("dialog " + dlg.id + ": no utterances");
            ds.dialogs.push_back(std::move(dlg));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
        }
    }
    if (!have_meta) throw DataError(path + ": empty dataset file (missing meta line)");
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset file: " + path);
    nlohmann::json meta{{"d_a", ds.meta.d_a}, {"d_t", ds.meta.d_t}, {"d_s", ds.meta.d_s},
                        {"c", ds.meta.num_classes}};
    if (!ds.meta.class_names.empty()) meta["classes"] = ds.meta.class_names;
    if (!ds.meta.split_tag.empty()) meta["split"] = ds.meta.split_tag;
    out << meta.dump() << "\n";
    for (const auto& d : ds.dialogs) {
        nlohmann::json utts = nlohmann::json::array();
        for (const auto& u : d.utterances) {
            nlohmann::json ju{{"a", u.acoustic}, {"t", u.lexical}, {"s", u.speaker_emb},
                              {"y", u.label}};
            ju["spk"] = u.speaker_tag ? nlohmann::json(*u.speaker_tag) : nlohmann::json(nullptr);
            utts.push_back(std::move(ju));
        }
        out << nlohmann::json{{"id", d.id}, {"utts", std::move(utts)}}.dump() << "\n";
    }
}

enum class SynthRegime { Pointwise, Contextual, ContextualSpeaker };

inline std::string to_string(SynthRegime r) {
    switch (r) {
        case SynthRegime::Pointwise: return "pointwise";
        case SynthRegime::Contextual: return "contextual";
        case SynthRegime::ContextualSpeaker: return "contextual-speaker";
    }
    return "?";
}

// Desk-scale stand-in for a labeled conversation corpus.
//
// Label regimes:
//   Pointwise          y_t uniform; features drawn around centroid[y_t].
//   Contextual         y_t uniform iid; utterance t's features come from
//                      centroid[perm[y_{t-1}]] (centroid[y_1] for t = 1).
//                      A label is therefore readable only from the features
//                      of the utterance after it, never from its own, so
//                      order-aware models separate from permutation-
//                      equivariant ones.
//   ContextualSpeaker  y_1 uniform, y_t = (y_{t-1} + side_t) mod C where
//                      side_t in {0,1} is the (randomly drawn) speaker slot
//                      of utterance t. Acoustic/lexical features reveal y_1
//                      only (a shared neutral centroid after t = 1); the
//                      speaker embedding is the sole observable carrying
//                      side_t.
struct SynthSpec {
    int num_classes = 4;
    int d_a = 8;
    int d_t = 6;
    int d_s = 4;
    int num_speakers = 10;      // grouped into fixed pairs per dialog
    int num_dialogs = 100;
    int len_min = 6;
    int len_max = 12;
    double sigma = 0.1;
    SynthRegime regime = SynthRegime::Pointwise;
    std::vector<int> perm;      // centroid permutation; default shift-by-one
    bool random_turns = false;  // true: speaker slot per utterance is random
                                // instead of strictly alternating
};

namespace detail {
inline std::vector<Matrix> make_centroids(int count, int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<Matrix> cs;
    cs.reserve(count);
    for (int k = 0; k < count; ++k) {
        Matrix c(1, dim);
        for (int j = 0; j < dim; ++j) c[j] = 2.0 * n01(rng);
        cs.push_back(std::move(c));
    }
    return cs;
}

inline std::vector<double> sample_around(const Matrix& centroid, double sigma,
                                         std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(centroid.size());
    for (size_t j = 0; j < v.size(); ++j) v[j] = centroid[j] + sigma * n01(rng);
    return v;
}
}  // namespace detail

inline Dataset synth_dialogs(const SynthSpec& spec, uint64_t seed) {
    if (spec.num_classes < 2) throw DataError("synth: need at least 2 classes");
    if (spec.sigma < 0.0) throw DataError("synth: sigma must be nonnegative");
    if (spec.num_speakers < 2 || spec.num_speakers % 2 != 0)
        throw DataError("synth: num_speakers must be even and >= 2");
    if (spec.len_min < 1 || spec.len_max < spec.len_min)
        throw DataError("synth: bad dialog length range");

    std::vector<int> perm = spec.perm;
    if (perm.empty()) {
        perm.resize(spec.num_classes);
        for (int k = 0; k < spec.num_classes; ++k) perm[k] = (k + 1) % spec.num_classes;
    }
    if (static_cast<int>(perm.size()) != spec.num_classes)
        throw DataError("synth: permutation size != num_classes");

    std::mt19937_64 rng(seed);
    // One extra centroid (index num_classes) serves as the class-neutral
    // centroid for the speaker regime; drawing it unconditionally keeps the
    // rng stream identical across regimes for a given seed.
    const auto cent_a = detail::make_centroids(spec.num_classes + 1, spec.d_a, rng);
    const auto cent_t = detail::make_centroids(spec.num_classes + 1, spec.d_t, rng);
    // Speaker centroids: a random vector per pair plus/minus a shared side
    // direction, so which side of a pair a speaker sits on generalizes to
    // speakers never seen in training.
    const auto cent_pair = detail::make_centroids(spec.num_speakers / 2, spec.d_s, rng);
    const auto side_dir = detail::make_centroids(1, spec.d_s, rng);
    std::vector<Matrix> cent_s;
    for (int k = 0; k < spec.num_speakers / 2; ++k)
        for (int s = 0; s < 2; ++s) {
            Matrix c = cent_pair[k];
            for (size_t j = 0; j < c.size(); ++j)
                c[j] += (s == 0 ? -1.0 : 1.0) * side_dir[0][j];
            cent_s.push_back(std::move(c));
        }

    std::uniform_int_distribution<int> cls(0, spec.num_classes - 1);
    std::uniform_int_distribution<int> len(spec.len_min, spec.len_max);
    std::uniform_int_distribution<int> pair(0, spec.num_speakers / 2 - 1);
    std::uniform_int_distribution<int> coin(0, 1);

    Dataset ds;
    ds.meta.d_a = spec.d_a;
    ds.meta.d_t = spec.d_t;
    ds.meta.d_s = spec.d_s;
    ds.meta.num_classes = spec.num_classes;
    for (int k = 0; k < spec.num_classes; ++k)
        ds.meta.class_names.push_back("class" + std::to_string(k));

    for (int di = 0; di < spec.num_dialogs; ++di) {
        Dialog dlg;
        dlg.id = "synth" + std::to_string(di);
        const int L = len(rng);
        // Speakers come in fixed pairs (2k, 2k+1) so speaker-independent
        // splitting stays feasible.
        const int p = pair(rng);
        int prev1 = -1;  // y_{t-1}
        for (int t = 0; t < L; ++t) {
            // The speaker regime always randomizes turn order; otherwise the
            // turn index alone would reveal side_t.
            const bool random_side =
                spec.random_turns || spec.regime == SynthRegime::ContextualSpeaker;
            const int side = random_side ? coin(rng) : t % 2;
            int y, centroid_class;
            switch (spec.regime) {
                case SynthRegime::Pointwise:
                    y = cls(rng);
                    centroid_class = y;
                    break;
                case SynthRegime::Contextual:
                    y = cls(rng);
                    centroid_class = (t == 0) ? y : perm[prev1];
                    break;
                case SynthRegime::ContextualSpeaker:
                    y = (t == 0) ? cls(rng) : (prev1 + side) % spec.num_classes;
                    centroid_class = (t == 0) ? y : spec.num_classes;  // neutral
                    break;
            }
            UtteranceRecord u;
            u.acoustic = detail::sample_around(cent_a[centroid_class], spec.sigma, rng);
            u.lexical = detail::sample_around(cent_t[centroid_class], spec.sigma, rng);
            const int spk = 2 * p + side;
            u.speaker_emb = detail::sample_around(cent_s[spk], spec.sigma, rng);
            u.speaker_tag = "spk" + std::to_string(spk);
            u.label = y;
            dlg.utterances.push_back(std::move(u));
            prev1 = y;
        }
        ds.dialogs.push_back(std::move(dlg));
    }
    return ds;
}

// Dialog-granularity split. With speaker tags, dialogs sharing a speaker stay
// on the same side (connected components over shared tags).
inline std::pair<Dataset, Dataset> split_by_dialog(const Dataset& ds, double fraction,
                                                   uint64_t seed) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw DataError("split: fraction must be in (0,1)");
    const int n = static_cast<int>(ds.dialogs.size());
    if (n < 2) throw DataError("split: need at least 2 dialogs");

    bool tagged = false;
    for (const auto& d : ds.dialogs)
        for (const auto& u : d.utterances)
            if (u.speaker_tag) tagged = true;

    // Union dialogs sharing a speaker tag.
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::string sample_tag;
    if (tagged) {
        std::map<std::string, int> owner;
        for (int i = 0; i < n; ++i)
            for (const auto& u : ds.dialogs[i].utterances)
                if (u.speaker_tag) {
                    sample_tag = *u.speaker_tag;
                    auto [it, inserted] = owner.emplace(*u.speaker_tag, i);
                    if (!inserted) parent[find(i)] = find(it->second);
                }
    }
    std::map<int, std::vector<int>> groups;
    for (int i = 0; i < n; ++i) groups[find(i)].push_back(i);
    std::vector<std::vector<int>> comps;
    for (auto& [root, members] : groups) comps.push_back(std::move(members));
    if (static_cast<int>(comps.size()) < 2)
        throw DataError("split: speaker-independent split impossible, all dialogs share "
                        "speakers (e.g. tag '" + sample_tag + "')");

    std::mt19937_64 rng(seed);
    std::shuffle(comps.begin(), comps.end(), rng);

    const int target = std::max(1, std::min(n - 1, static_cast<int>(std::lround(fraction * n))));
    Dataset train, test;
    train.meta = ds.meta;
    train.meta.split_tag = "train";
    test.meta = ds.meta;
    test.meta.split_tag = "test";
    // Greedy fill of the train side; the last component is reserved for test
    // when test would otherwise end up empty.
    int taken = 0;
    std::vector<const std::vector<int>*> to_test;
    for (size_t ci = 0; ci < comps.size(); ++ci) {
        const bool last = (ci + 1 == comps.size());
        if (taken < target && !(last && to_test.empty())) {
            for (int i : comps[ci]) train.dialogs.push_back(ds.dialogs[i]);
            taken += static_cast<int>(comps[ci].size());
        } else {
            to_test.push_back(&comps[ci]);
        }
    }
    for (const auto* comp : to_test)
        for (int i : *comp) test.dialogs.push_back(ds.dialogs[i]);
    if (train.dialogs.empty() || test.dialogs.empty())
        throw DataError("split: speaker-independent split impossible "
                        "(tag '" + sample_tag + "' spans too many dialogs)");
    return {std::move(train), std::move(test)};
}

}  // namespace convemo
