#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "convemo/seqmodel.hpp"
#include "convemo/tape.hpp"

namespace convemo {

struct TrainConfig {
    double lr = 0.0001;
    int batch_size_dialogs = 20;
    int epochs = 200;
    double l2_coeff = 1e-5;
    uint64_t seed = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int early_stop_patience = 20;  // on held-out UA; <= 0 disables

    void validate() const {
        if (lr < 0.0) throw NumericError("lr must be nonnegative");
        if (batch_size_dialogs < 1) throw NumericError("batch size must be >= 1");
        if (epochs < 1) throw NumericError("epochs must be >= 1");
        if (l2_coeff < 0.0) throw NumericError("l2_coeff must be nonnegative");
    }
};

struct Metrics {
    std::vector<std::vector<long>> confusion;  // [true][pred]
    std::vector<double> per_class_recall;
    double unweighted_accuracy = 0.0;
    double weighted_accuracy = 0.0;

    static Metrics from_confusion(std::vector<std::vector<long>> conf) {
        Metrics m;
        m.confusion = std::move(conf);
        const int C = static_cast<int>(m.confusion.size());
        m.per_class_recall.assign(C, 0.0);
        long total = 0, correct = 0;
        int present = 0;
        double recall_sum = 0.0;
        for (int c = 0; c < C; ++c) {
            long row = 0;
            for (int p = 0; p < C; ++p) row += m.confusion[c][p];
            total += row;
            correct += m.confusion[c][c];
            if (row > 0) {
                m.per_class_recall[c] = static_cast<double>(m.confusion[c][c]) / row;
                recall_sum += m.per_class_recall[c];
                ++present;
            }
        }
        m.unweighted_accuracy = present > 0 ? recall_sum / present : 0.0;
        m.weighted_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
        return m;
    }
};

// Mean over utterances of -log(probs[t, y_t]) plus the gradient w.r.t. the
// pre-softmax logits, (probs - onehot) / L.
struct CrossEntropyResult {
    double loss = 0.0;
    Matrix dlogits;
    long clamp_hits = 0;
};

inline CrossEntropyResult cross_entropy_loss(const Matrix& probs, const std::vector<int>& labels) {
    if (static_cast<int>(labels.size()) != probs.rows())
        throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for " + probs.shape_str() + " probs");
    CrossEntropyResult r;
    r.dlogits = probs;
    const int L = probs.rows();
    for (int t = 0; t < L; ++t) {
        double p = probs.at(t, labels[t]);
        if (p < 1e-12) {
            p = 1e-12;
            ++r.clamp_hits;
        }
        r.loss -= std::log(p);
        r.dlogits.at(t, labels[t]) -= 1.0;
    }
    r.loss /= L;
    r.dlogits = scale(r.dlogits, 1.0 / L);
    return r;
}

struct AdamState {
    struct Slot {
        Matrix m, v;
    };
    std::map<std::string, Slot> slots;
    long step = 0;
};

// Standard Adam with bias correction. L2 enters as l2_coeff * theta added to
// the gradient before the moment update.
inline void adam_step(AdamState& state, std::vector<ParamRef> params, const GradStore& grads,
                      const TrainConfig& cfg) {
    ++state.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& p : params) {
        const Matrix* g = grads.find(p.name);
        if (!g) continue;
        if (!g->all_finite())
            throw NumericError("adam_step: non-finite gradient for " + p.name);
        auto it = state.slots.find(p.name);
        if (it == state.slots.end())
            it = state.slots.emplace(p.name,
                                     AdamState::Slot{Matrix(g->rows(), g->cols()),
                                                     Matrix(g->rows(), g->cols())}).first;
        AdamState::Slot& s = it->second;
        Matrix& theta = *p.tensor;
        for (size_t i = 0; i < theta.size(); ++i) {
            const double gi = (*g)[i] + cfg.l2_coeff * theta[i];
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

inline std::vector<int> labels_of(const Dialog& d) {
    std::vector<int> y;
    y.reserve(d.utterances.size());
    for (const auto& u : d.utterances) y.push_back(u.label);
    return y;
}

// Argmax per utterance, ties toward the lowest class index. Dropout off.
inline Metrics evaluate(Model& model, const std::vector<Dialog>& dialogs) {
    const int C = model.cfg.num_classes;
    std::vector<std::vector<long>> conf(C, std::vector<long>(C, 0));
    for (const auto& dlg : dialogs) {
        Tape tape;
        BoundModel b = bind_model(tape, model);
        ForwardResult fr = forward_dialog(tape, model, b, dlg, /*train=*/false);
        for (int t = 0; t < fr.probs.rows(); ++t) {
            int pred = 0;
            for (int c = 1; c < C; ++c)
                if (fr.probs.at(t, c) > fr.probs.at(t, pred)) pred = c;
            conf[dlg.utterances[t].label][pred]++;
        }
    }
    return Metrics::from_confusion(std::move(conf));
}

// Chunked parallel evaluation; per-chunk confusion matrices merged in chunk
// order so the result matches the single-threaded path exactly.
inline Metrics evaluate_threaded(Model& model, const std::vector<Dialog>& dialogs, int threads) {
    if (threads <= 1 || dialogs.size() < 2) return evaluate(model, dialogs);
    const int C = model.cfg.num_classes;
    const int n = std::min<int>(threads, static_cast<int>(dialogs.size()));
    std::vector<std::vector<std::vector<long>>> partial(
        n, std::vector<std::vector<long>>(C, std::vector<long>(C, 0)));
    std::vector<std::thread> workers;
    const size_t chunk = (dialogs.size() + n - 1) / n;
    for (int w = 0; w < n; ++w) {
        workers.emplace_back([&, w] {
            const size_t begin = w * chunk;
            const size_t end = std::min(dialogs.size(), begin + chunk);
            for (size_t i = begin; i < end; ++i) {
                Tape tape;
                BoundModel b = bind_model(tape, model);
                ForwardResult fr = forward_dialog(tape, model, b, dialogs[i], false);
                for (int t = 0; t < fr.probs.rows(); ++t) {
                    int pred = 0;
                    for (int c = 1; c < C; ++c)
                        if (fr.probs.at(t, c) > fr.probs.at(t, pred)) pred = c;
                    partial[w][dialogs[i].utterances[t].label][pred]++;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    std::vector<std::vector<long>> conf(C, std::vector<long>(C, 0));
    for (int w = 0; w < n; ++w)
        for (int a = 0; a < C; ++a)
            for (int p = 0; p < C; ++p) conf[a][p] += partial[w][a][p];
    return Metrics::from_confusion(std::move(conf));
}

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_ua = -1.0;  // -1 when not computed
    double val_ua = -1.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = -1;
    double best_val_ua = -1.0;
    bool stopped_early = false;
};

// Dialog-level batches, shuffled per epoch. Loss per batch is the mean over
// all utterances in the batch. Deterministic for a fixed seed.
inline TrainResult train(Model& model, const std::vector<Dialog>& train_dialogs,
                         const std::vector<Dialog>* val_dialogs, const TrainConfig& cfg,
                         bool track_train_ua = false) {
    cfg.validate();
    if (train_dialogs.empty()) throw DataError("train: empty training set");

    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    AdamState adam;
    TrainResult result;
    int since_best = 0;
    std::vector<Matrix> best_weights;  // snapshot at the best validation UA

    std::vector<size_t> order(train_dialogs.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        long utt_sum = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size_dialogs) {
            const size_t end = std::min(order.size(), start + cfg.batch_size_dialogs);
            long batch_utts = 0;
            for (size_t i = start; i < end; ++i)
                batch_utts += static_cast<long>(train_dialogs[order[i]].utterances.size());

            GradStore grads;
            double batch_loss = 0.0;
            for (size_t i = start; i < end; ++i) {
                const Dialog& dlg = train_dialogs[order[i]];
                Tape tape;
                BoundModel b = bind_model(tape, model);
                ForwardResult fr = forward_dialog(tape, model, b, dlg, /*train=*/true,
                                                  &dropout_rng);
                Var loss = tape.cross_entropy_sum(fr.logits, labels_of(dlg));
                batch_loss += loss->value.at(0, 0);
                tape.backward(loss, 1.0 / batch_utts);
                collect_grads(b, grads);
            }
            batch_loss /= batch_utts;
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch starting at dialog " + std::to_string(start));
            loss_sum += batch_loss * batch_utts;
            utt_sum += batch_utts;
            if (cfg.lr > 0.0) adam_step(adam, model.param_refs(), grads, cfg);
        }

        EpochLog row;
        row.epoch = epoch;
        row.train_loss = loss_sum / utt_sum;
        if (track_train_ua)
            row.train_ua = evaluate(model, train_dialogs).unweighted_accuracy;
        if (val_dialogs && !val_dialogs->empty()) {
            row.val_ua = evaluate(model, *val_dialogs).unweighted_accuracy;
            if (row.val_ua > result.best_val_ua) {
                result.best_val_ua = row.val_ua;
                result.best_epoch = epoch;
                since_best = 0;
                best_weights.clear();
                for (auto& p : model.param_refs()) best_weights.push_back(*p.tensor);
            } else if (++since_best >= cfg.early_stop_patience && cfg.early_stop_patience > 0) {
                row.seconds = std::chrono::duration<double>(
                                  std::chrono::steady_clock::now() - t0).count();
                result.log.push_back(row);
                result.stopped_early = true;
                break;
            }
        }
        row.seconds = std::chrono::duration<double>(
                          std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(row);
    }
    // Early stopping keeps the weights from the best validation epoch.
    if (!best_weights.empty()) {
        auto params = model.param_refs();
        for (size_t i = 0; i < params.size(); ++i) *params[i].tensor = best_weights[i];
    }
    return result;
}

}  // namespace convemo
