#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "convemo/data.hpp"
#include "convemo/fusion.hpp"
#include "convemo/matrix.hpp"
#include "convemo/tape.hpp"

namespace convemo {

enum class ClassifierMode { SaGru, AttnOnly, GruOnly };

inline std::string to_string(ClassifierMode m) {
    switch (m) {
        case ClassifierMode::SaGru: return "SA_GRU";
        case ClassifierMode::AttnOnly: return "ATTN_ONLY";
        case ClassifierMode::GruOnly: return "GRU_ONLY";
    }
    return "?";
}

struct ModelConfig {
    int d = 100;
    int heads = 4;
    int num_classes = 4;
    int d_a = 0, d_t = 0, d_s = 0;
    FusionMode fusion_mode = FusionMode::ATS;
    ClassifierMode classifier_mode = ClassifierMode::SaGru;
    double dropout_p = 0.2;
    bool scaled_attention = false;

    void validate() const {
        if (d < 2 || d % 2 != 0)
            throw ShapeError("model dim d=" + std::to_string(d) + " must be even and >= 2");
        if (heads < 1 || d % heads != 0)
            throw ShapeError("d=" + std::to_string(d) + " not divisible by heads=" +
                             std::to_string(heads));
        if (num_classes < 2) throw ShapeError("need at least 2 classes");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ShapeError("dropout_p must be in [0,1)");
    }
    int head_dim() const { return d / heads; }
    int gru_hidden() const { return d / 2; }  // per direction; concat restores d
};

// One GRU direction: gates z, r and candidate, each with input, recurrent and
// bias tensors.
struct GruDirParams {
    Matrix W_z, W_r, W_h;  // hidden x d
    Matrix U_z, U_r, U_h;  // hidden x hidden
    Matrix b_z, b_r, b_h;  // hidden x 1
};

struct GruParams {
    GruDirParams fwd, bwd;
};

struct HeadParams {
    Matrix W_q, W_k, W_v;  // d x (d/heads)
};

struct AttnParams {
    std::vector<HeadParams> heads;
};

struct ClassifierParams {
    Matrix W_out;  // C x d
    Matrix b_out;  // C x 1
};

// Named view of every trainable tensor, in a fixed order. The order defines
// checkpoint layout, Adam state association and gradient-merge determinism.
struct ParamRef {
    std::string name;
    Matrix* tensor;
};

class Model {
public:
    ModelConfig cfg;
    FusionParams fusion;
    GruParams gru;
    Matrix W_in;  // d x d input projection, ATTN_ONLY head only
    AttnParams attn;
    ClassifierParams cls;

    static Model build(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        m.fusion.mode = cfg.fusion_mode;
        const int d = cfg.d, hd = cfg.gru_hidden(), dh = cfg.head_dim();
        m.fusion.W_a = Matrix(d, cfg.d_a);
        m.fusion.W_t = Matrix(d, cfg.d_t);
        if (m.fusion.uses_speaker()) m.fusion.W_s = Matrix(d, cfg.d_s);
        if (m.fusion.uses_attention()) {
            m.fusion.W_F = Matrix(d, d);
            m.fusion.w_F = Matrix(d, 1);
        }
        if (m.uses_gru()) {
            for (GruDirParams* dir : {&m.gru.fwd, &m.gru.bwd}) {
                dir->W_z = dir->W_r = dir->W_h = Matrix(hd, d);
                dir->U_z = dir->U_r = dir->U_h = Matrix(hd, hd);
                dir->b_z = dir->b_r = dir->b_h = Matrix(hd, 1);
            }
        }
        if (cfg.classifier_mode == ClassifierMode::AttnOnly) m.W_in = Matrix(d, d);
        if (m.uses_attention_layer()) {
            m.attn.heads.resize(cfg.heads);
            for (auto& h : m.attn.heads) h.W_q = h.W_k = h.W_v = Matrix(d, dh);
        }
        m.cls.W_out = Matrix(cfg.num_classes, d);
        m.cls.b_out = Matrix(cfg.num_classes, 1);
        m.init(seed);
        return m;
    }

    bool uses_gru() const { return cfg.classifier_mode != ClassifierMode::AttnOnly; }
    bool uses_attention_layer() const { return cfg.classifier_mode != ClassifierMode::GruOnly; }

    // Uniform [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases zero.
    void init(uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& p : param_refs()) {
            Matrix& t = *p.tensor;
            if (t.cols() == 1 && p.name.find("b_") != std::string::npos) continue;  // biases
            const double a = std::sqrt(6.0 / (t.rows() + t.cols()));
            std::uniform_real_distribution<double> u(-a, a);
            for (size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
        }
    }

    std::vector<ParamRef> param_refs() {
        std::vector<ParamRef> refs;
        auto push = [&](const std::string& name, Matrix& m) {
            if (m.size() > 0) refs.push_back({name, &m});
        };
        push("fusion.W_a", fusion.W_a);
        push("fusion.W_t", fusion.W_t);
        push("fusion.W_s", fusion.W_s);
        push("fusion.W_F", fusion.W_F);
        push("fusion.w_F", fusion.w_F);
        if (uses_gru()) {
            const char* dirs[2] = {"fwd", "bwd"};
            GruDirParams* ps[2] = {&gru.fwd, &gru.bwd};
            for (int i = 0; i < 2; ++i) {
                const std::string base = std::string("gru.") + dirs[i] + ".";
                push(base + "W_z", ps[i]->W_z);
                push(base + "U_z", ps[i]->U_z);
                push(base + "b_z", ps[i]->b_z);
                push(base + "W_r", ps[i]->W_r);
                push(base + "U_r", ps[i]->U_r);
                push(base + "b_r", ps[i]->b_r);
                push(base + "W_h", ps[i]->W_h);
                push(base + "U_h", ps[i]->U_h);
                push(base + "b_h", ps[i]->b_h);
            }
        }
        push("attn.W_in", W_in);
        for (size_t i = 0; i < attn.heads.size(); ++i) {
            const std::string base = "attn.head" + std::to_string(i) + ".";
            push(base + "W_q", attn.heads[i].W_q);
            push(base + "W_k", attn.heads[i].W_k);
            push(base + "W_v", attn.heads[i].W_v);
        }
        push("cls.W_out", cls.W_out);
        push("cls.b_out", cls.b_out);
        return refs;
    }
};

// Tape handles for one forward pass: every parameter bound as a leaf, keyed
// by the same names param_refs() uses.
struct BoundModel {
    std::vector<std::pair<std::string, Var>> leaves;
    FusionVars fusion;
    Var find(const std::string& name) const {
        for (const auto& [n, v] : leaves)
            if (n == name) return v;
        throw std::runtime_error("no bound parameter named " + name);
    }
};

inline BoundModel bind_model(Tape& tape, Model& model) {
    BoundModel b;
    for (auto& p : model.param_refs())
        b.leaves.emplace_back(p.name, tape.leaf(*p.tensor));
    const FusionParams& f = model.fusion;
    b.fusion.W_a = b.find("fusion.W_a");
    b.fusion.W_t = b.find("fusion.W_t");
    if (f.uses_speaker()) b.fusion.W_s = b.find("fusion.W_s");
    if (f.uses_attention()) {
        b.fusion.W_F = b.find("fusion.W_F");
        b.fusion.w_F = b.find("fusion.w_F");
    }
    return b;
}

// Read gradients off the bound leaves into a GradStore, scaled by `scale`.
inline void collect_grads(const BoundModel& b, GradStore& store, double scale = 1.0) {
    for (const auto& [name, var] : b.leaves) {
        if (var->grad.rows() == 0) {
            store.get_or_zero(name, var->value.rows(), var->value.cols());
        } else {
            store.accumulate(name, scale == 1.0 ? var->grad : convemo::scale(var->grad, scale));
        }
    }
}

// One GRU step, paper convention: z gates the candidate, (1-z) keeps h_prev.
inline Var gru_step(Tape& tape, const BoundModel& b, const std::string& dir, Var f_t,
                    Var h_prev) {
    auto p = [&](const char* t) { return b.find("gru." + dir + "." + t); };
    Var z = tape.sigmoid_ew(tape.add(
        tape.add(tape.matmul(p("W_z"), f_t), tape.matmul(p("U_z"), h_prev)), p("b_z")));
    Var r = tape.sigmoid_ew(tape.add(
        tape.add(tape.matmul(p("W_r"), f_t), tape.matmul(p("U_r"), h_prev)), p("b_r")));
    Var cand = tape.tanh_ew(tape.add(
        tape.add(tape.matmul(p("W_h"), f_t),
                 tape.matmul(p("U_h"), tape.hadamard(r, h_prev))),
        p("b_h")));
    return tape.add(tape.hadamard(tape.one_minus(z), h_prev), tape.hadamard(z, cand));
}

// Bi-directional scan from zero initial states. Row t of the result is
// [h_fwd_t ; h_bwd_t], total width d.
inline Var bi_gru(Tape& tape, const BoundModel& b, const ModelConfig& cfg,
                  const std::vector<Var>& F) {
    const int L = static_cast<int>(F.size());
    const Matrix h0(cfg.gru_hidden(), 1);
    std::vector<Var> fwd(L), bwd(L);
    Var h = tape.constant(h0);
    for (int t = 0; t < L; ++t) h = fwd[t] = gru_step(tape, b, "fwd", F[t], h);
    h = tape.constant(h0);
    for (int t = L - 1; t >= 0; --t) h = bwd[t] = gru_step(tape, b, "bwd", F[t], h);
    std::vector<Var> rows(L);
    for (int t = 0; t < L; ++t)
        rows[t] = tape.transpose(tape.concat_rows({fwd[t], bwd[t]}));
    return tape.concat_rows(rows);  // L x d
}

// Multi-head dot-product self-attention over H (L x d). No score scaling by
// default; opt-in 1/sqrt(d/h).
inline Var self_attention(Tape& tape, const BoundModel& b, const ModelConfig& cfg, Var H) {
    std::vector<Var> heads;
    for (int i = 0; i < cfg.heads; ++i) {
        const std::string base = "attn.head" + std::to_string(i) + ".";
        Var q = tape.matmul(H, b.find(base + "W_q"));
        Var k = tape.matmul(H, b.find(base + "W_k"));
        Var v = tape.matmul(H, b.find(base + "W_v"));
        Var scores = tape.matmul(q, tape.transpose(k));
        if (cfg.scaled_attention)
            scores = tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
        heads.push_back(tape.matmul(tape.softmax_rows(scores), v));
    }
    return tape.concat_cols(heads);  // L x d
}

struct ForwardResult {
    Var logits = nullptr;            // L x C
    Matrix probs;                    // softmax of logits, detached
    std::vector<Matrix> fusion_attn; // per-utterance modality weights (non-ADD)
};

inline Matrix dropout_mask(int rows, int cols, double p, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 - p;
    for (size_t i = 0; i < m.size(); ++i) m[i] = (u(rng) < keep) ? 1.0 / keep : 0.0;
    return m;
}

// Full forward pass over one dialog. Dropout (train mode only) is applied to
// the representation entering the classifier head.
inline ForwardResult forward_dialog(Tape& tape, Model& model, const BoundModel& b,
                                    const Dialog& dialog, bool train_mode = false,
                                    std::mt19937_64* rng = nullptr) {
    FusedDialog fd = fuse_dialog(tape, model.fusion, b.fusion, dialog);
    const ModelConfig& cfg = model.cfg;

    Var rep;
    switch (cfg.classifier_mode) {
        case ClassifierMode::SaGru:
            rep = self_attention(tape, b, cfg, bi_gru(tape, b, cfg, fd.fused));
            break;
        case ClassifierMode::GruOnly:
            rep = bi_gru(tape, b, cfg, fd.fused);
            break;
        case ClassifierMode::AttnOnly: {
            std::vector<Var> rows;
            for (Var f : fd.fused) rows.push_back(tape.transpose(f));
            Var F = tape.concat_rows(rows);                        // L x d
            Var H = tape.matmul(F, tape.transpose(b.find("attn.W_in")));
            rep = self_attention(tape, b, cfg, H);
            break;
        }
    }

    if (train_mode && cfg.dropout_p > 0.0) {
        if (!rng) throw NumericError("forward_dialog: train mode needs an rng for dropout");
        rep = tape.apply_mask(rep, dropout_mask(rep->value.rows(), rep->value.cols(),
                                                cfg.dropout_p, *rng));
    }

    Var logits = tape.add_bias_rows(tape.matmul(rep, tape.transpose(b.find("cls.W_out"))),
                                    b.find("cls.b_out"));
    ForwardResult out;
    out.logits = logits;
    out.probs = convemo::softmax_rows(logits->value);
    out.fusion_attn = std::move(fd.attn);
    return out;
}

// ---- checkpoint I/O ----

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"d", c.d},
            {"heads", c.heads},
            {"num_classes", c.num_classes},
            {"d_a", c.d_a},
            {"d_t", c.d_t},
            {"d_s", c.d_s},
            {"fusion_mode", to_string(c.fusion_mode)},
            {"classifier_mode", to_string(c.classifier_mode)},
            {"dropout_p", c.dropout_p},
            {"scaled_attention", c.scaled_attention}};
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "ATS") return FusionMode::ATS;
    if (s == "AT") return FusionMode::AT;
    if (s == "ADD") return FusionMode::ADD;
    throw DataError("unknown fusion mode: " + s);
}

inline ClassifierMode classifier_mode_from_string(const std::string& s) {
    if (s == "SA_GRU") return ClassifierMode::SaGru;
    if (s == "ATTN_ONLY") return ClassifierMode::AttnOnly;
    if (s == "GRU_ONLY") return ClassifierMode::GruOnly;
    throw DataError("unknown classifier mode: " + s);
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.at("d").get<int>();
    c.heads = j.at("heads").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.d_a = j.at("d_a").get<int>();
    c.d_t = j.at("d_t").get<int>();
    c.d_s = j.at("d_s").get<int>();
    c.fusion_mode = fusion_mode_from_string(j.at("fusion_mode").get<std::string>());
    c.classifier_mode = classifier_mode_from_string(j.at("classifier_mode").get<std::string>());
    c.dropout_p = j.at("dropout_p").get<double>();
    c.scaled_attention = j.at("scaled_attention").get<bool>();
    return c;
}

inline void save_checkpoint(Model& model, const std::string& path) {
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& p : model.param_refs())
        tensors.push_back({{"name", p.name},
                           {"rows", p.tensor->rows()},
                           {"cols", p.tensor->cols()},
                           {"data", p.tensor->data()}});
    nlohmann::json doc{{"config", config_to_json(model.cfg)}, {"tensors", std::move(tensors)}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out << doc.dump(2) << "\n";
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": malformed checkpoint: " + e.what());
    }
    Model model = Model::build(config_from_json(doc.at("config")), /*seed=*/0);
    auto refs = model.param_refs();
    for (const auto& jt : doc.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        bool found = false;
        for (auto& p : refs) {
            if (p.name != name) continue;
            Matrix loaded(jt.at("rows").get<int>(), jt.at("cols").get<int>(),
                          jt.at("data").get<std::vector<double>>());
            if (!loaded.same_shape(*p.tensor))
                throw DataError(path + ": tensor " + name + " is " + loaded.shape_str() +
                                ", expected " + p.tensor->shape_str());
            *p.tensor = std::move(loaded);
            found = true;
            break;
        }
        if (!found) throw DataError(path + ": unexpected tensor " + name);
    }
    return model;
}

}  // namespace convemo
