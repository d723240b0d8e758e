// convemo: synthesize dialog datasets, train and evaluate the ATS-Fusion /
// SA-GRU conversational emotion classifier, run ablations and gradient checks.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "convemo/data.hpp"
#include "convemo/modelcheck.hpp"
#include "convemo/seqmodel.hpp"
#include "convemo/systems.hpp"
#include "convemo/trainer.hpp"

namespace {

using namespace convemo;

uint64_t default_seed() {
    if (const char* env = std::getenv("CONVEMO_SEED"))
        return std::strtoull(env, nullptr, 10);
    return 1;
}

// Optional JSON config file; precedence is CLI flag > config key > default.
struct ConfigFile {
    nlohmann::json j = nlohmann::json::object();

    void load(const std::string& path) {
        if (path.empty()) return;
        std::ifstream in(path);
        if (!in) throw DataError("cannot open config file: " + path);
        in >> j;
    }
    template <typename T>
    void apply(const CLI::App* cmd, const std::string& flag, const std::string& key, T& var) const {
        const CLI::Option* opt = cmd->get_option_no_throw(flag);
        if ((!opt || opt->count() == 0) && j.contains(key)) var = j.at(key).get<T>();
    }
};

struct HyperFlags {
    std::string system = "S5";
    int d = 100;
    int heads = 4;
    double lr = 0.0001;
    int batch = 20;
    int epochs = 200;
    double dropout = 0.2;
    double l2 = 1e-5;
    int patience = 20;
    bool scaled_attn = false;
    uint64_t seed = default_seed();
    std::string config_path;

    void add_to(CLI::App* cmd, bool with_system = true) {
        if (with_system)
            cmd->add_option("--system", system, "System preset S1..S5 (Table-1 rows)")
                ->check(CLI::IsMember({"S1", "S2", "S3", "S4", "S5"}));
        cmd->add_option("--d", d, "Model dimension (default 100)");
        cmd->add_option("--heads", heads, "Attention heads (default 4)");
        cmd->add_option("--lr", lr, "Adam learning rate (default 0.0001)");
        cmd->add_option("--batch", batch, "Batch size in dialogs (default 20)");
        cmd->add_option("--epochs", epochs, "Training epochs (default 200)");
        cmd->add_option("--dropout", dropout, "Dropout probability (default 0.2)");
        cmd->add_option("--l2", l2, "L2 coefficient (default 1e-5)");
        cmd->add_option("--patience", patience, "Early-stop patience on held-out UA");
        cmd->add_flag("--scaled-attn", scaled_attn, "Scale attention scores by 1/sqrt(d/h)");
        cmd->add_option("--seed", seed, "RNG seed (env CONVEMO_SEED fallback)");
        cmd->add_option("--config", config_path, "JSON config file; CLI flags win");
    }

    void apply_config(const CLI::App* cmd) {
        ConfigFile cf;
        cf.load(config_path);
        cf.apply(cmd, "--system", "system", system);
        cf.apply(cmd, "--d", "d", d);
        cf.apply(cmd, "--heads", "heads", heads);
        cf.apply(cmd, "--lr", "lr", lr);
        cf.apply(cmd, "--batch", "batch", batch);
        cf.apply(cmd, "--epochs", "epochs", epochs);
        cf.apply(cmd, "--dropout", "dropout", dropout);
        cf.apply(cmd, "--l2", "l2", l2);
        cf.apply(cmd, "--patience", "patience", patience);
        cf.apply(cmd, "--seed", "seed", seed);
    }

    ModelConfig model_config(const DatasetMeta& meta) const {
        const SystemPreset p = system_preset(system);
        ModelConfig mc;
        mc.d = d;
        mc.heads = heads;
        mc.num_classes = meta.num_classes;
        mc.d_a = meta.d_a;
        mc.d_t = meta.d_t;
        mc.d_s = meta.d_s;
        mc.fusion_mode = p.fusion;
        mc.classifier_mode = p.classifier;
        mc.dropout_p = dropout;
        mc.scaled_attention = scaled_attn;
        return mc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.lr = lr;
        tc.batch_size_dialogs = batch;
        tc.epochs = epochs;
        tc.l2_coeff = l2;
        tc.seed = seed;
        tc.early_stop_patience = patience;
        return tc;
    }
};

nlohmann::json metrics_to_json(const Metrics& m, const std::vector<std::string>& classes) {
    return {{"ua", m.unweighted_accuracy},
            {"wa", m.weighted_accuracy},
            {"per_class_recall", m.per_class_recall},
            {"confusion", m.confusion},
            {"classes", classes}};
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write file: " + path);
    out << content;
}

std::string csv_log(const TrainResult& tr) {
    std::ostringstream os;
    os << "epoch,train_loss,train_ua,val_ua,seconds\n";
    for (const auto& row : tr.log) {
        os << row.epoch << "," << std::setprecision(17) << row.train_loss << ",";
        if (row.train_ua >= 0.0) os << row.train_ua;
        os << ",";
        if (row.val_ua >= 0.0) os << row.val_ua;
        os << "," << std::setprecision(6) << row.seconds << "\n";
    }
    return os.str();
}

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd r;
    if (xs.empty()) return r;
    r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = xs.size() > 1 ? std::sqrt(ss / (xs.size() - 1)) : 0.0;
    return r;
}

// ---- synth ----

int cmd_synth(const SynthSpec& spec, uint64_t seed, double test_frac,
              const std::string& prefix) {
    Dataset full = synth_dialogs(spec, seed);
    auto [train, test] = split_by_dialog(full, 1.0 - test_frac, seed + 1);
    const std::string train_path = prefix + ".train.jsonl";
    const std::string test_path = prefix + ".test.jsonl";
    save_dataset(train, train_path);
    save_dataset(test, test_path);

    std::vector<long> counts(spec.num_classes, 0);
    for (const auto& d : full.dialogs)
        for (const auto& u : d.utterances) counts[u.label]++;
    std::cout << "regime=" << to_string(spec.regime) << " dialogs=" << full.dialogs.size()
              << " utterances=" << full.total_utterances() << "\n";
    std::cout << "train: " << train.dialogs.size() << " dialogs -> " << train_path << "\n";
    std::cout << "test:  " << test.dialogs.size() << " dialogs -> " << test_path << "\n";
    std::cout << "class balance:";
    for (int c = 0; c < spec.num_classes; ++c) std::cout << " " << counts[c];
    std::cout << "\n";
    return 0;
}

// ---- train ----

struct RunOutcome {
    double ua = 0.0;
    std::string checkpoint_path;
};

RunOutcome run_training(const HyperFlags& hf, uint64_t seed, const Dataset& train_set,
                        const Dataset* val_set, const std::string& out_dir,
                        const std::string& suffix, bool quiet) {
    Model model = Model::build(hf.model_config(train_set.meta), seed);
    TrainConfig tc = hf.train_config();
    tc.seed = seed;
    const std::vector<Dialog>* val = val_set ? &val_set->dialogs : nullptr;
    TrainResult tr = train(model, train_set.dialogs, val, tc);

    Metrics final = val_set ? evaluate(model, val_set->dialogs)
                            : evaluate(model, train_set.dialogs);
    RunOutcome out;
    out.ua = final.unweighted_accuracy;
    out.checkpoint_path = out_dir + "/checkpoint" + suffix + ".json";
    save_checkpoint(model, out.checkpoint_path);
    write_text(out_dir + "/train_log" + suffix + ".csv", csv_log(tr));
    write_text(out_dir + "/metrics" + suffix + ".json",
               metrics_to_json(final, train_set.meta.class_names).dump(2) + "\n");
    if (!quiet) {
        std::cout << "system=" << hf.system << " seed=" << seed
                  << " epochs_run=" << tr.log.size()
                  << " final_loss=" << tr.log.back().train_loss
                  << (val_set ? " val_ua=" : " train_ua=") << out.ua << "\n";
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conversational emotion recognition: ATS-Fusion + SA-GRU"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dialog dataset");
    SynthSpec spec;
    std::string regime = "pointwise";
    uint64_t synth_seed = default_seed();
    double test_frac = 0.2;
    std::string prefix = "synth";
    synth->add_option("--classes", spec.num_classes, "Number of emotion classes");
    synth->add_option("--dialogs", spec.num_dialogs, "Number of dialogs");
    synth->add_option("--regime", regime, "Label regime")
        ->check(CLI::IsMember({"pointwise", "contextual", "contextual-speaker"}));
    synth->add_option("--sigma", spec.sigma, "Feature noise level")
        ->check(CLI::NonNegativeNumber);
    synth->add_option("--d-a", spec.d_a, "Acoustic feature dim");
    synth->add_option("--d-t", spec.d_t, "Lexical feature dim");
    synth->add_option("--d-s", spec.d_s, "Speaker embedding dim");
    synth->add_option("--speakers", spec.num_speakers, "Speaker count (even)");
    synth->add_option("--len-min", spec.len_min, "Minimum dialog length");
    synth->add_option("--len-max", spec.len_max, "Maximum dialog length");
    synth->add_flag("--random-turns", spec.random_turns,
                    "Random speaker turn order instead of alternating");
    synth->add_option("--test-frac", test_frac, "Held-out dialog fraction");
    synth->add_option("--seed", synth_seed, "RNG seed (env CONVEMO_SEED fallback)");
    synth->add_option("--out-prefix", prefix, "Output path prefix");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model on a JSONL dataset");
    HyperFlags tf;
    std::string train_data, val_data, out_dir = ".";
    int repeats = 1, threads = 1;
    train_cmd->add_option("--data", train_data, "Training dataset (JSONL)")->required();
    train_cmd->add_option("--val", val_data, "Held-out dataset for early stopping");
    train_cmd->add_option("--out", out_dir, "Output directory");
    train_cmd->add_option("--repeats", repeats, "Train N times with seeds seed..seed+N-1")
        ->check(CLI::PositiveNumber);
    train_cmd->add_option("--threads", threads, "Worker threads (1 = reproducible mode)");
    tf.add_to(train_cmd);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string eval_model, eval_data, eval_out = "metrics.json", dump_attn;
    int eval_threads = 1;
    eval_cmd->add_option("--model", eval_model, "Checkpoint JSON")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset (JSONL)")->required();
    eval_cmd->add_option("--out", eval_out, "Metrics JSON output path");
    eval_cmd->add_option("--dump-attn", dump_attn, "Write per-utterance fusion weights CSV");
    eval_cmd->add_option("--threads", eval_threads, "Evaluation threads");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare systems S1..S5");
    HyperFlags af;
    std::string ab_train, ab_test, ab_systems = "S1,S2,S3,S4,S5", ab_out;
    int ab_repeats = 1;
    ablate_cmd->add_option("--train", ab_train, "Training dataset (JSONL)")->required();
    ablate_cmd->add_option("--test", ab_test, "Test dataset (JSONL)")->required();
    ablate_cmd->add_option("--systems", ab_systems, "Comma-separated subset of S1..S5");
    ablate_cmd->add_option("--repeats", ab_repeats, "Seeds per system")
        ->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--out", ab_out, "Optional JSON report path");
    af.add_to(ablate_cmd, /*with_system=*/false);

    // gradcheck
    auto* gc_cmd = app.add_subcommand("gradcheck",
                                      "Check analytic gradients against central differences");
    double gc_tol = 1e-4, gc_step = 1e-5;
    int gc_d = 8, gc_heads = 2, gc_len = 4, gc_classes = 3, gc_dialogs = 2;
    uint64_t gc_seed = default_seed();
    std::string gc_system = "S5";
    gc_cmd->add_option("--tol", gc_tol, "Relative error tolerance");
    gc_cmd->add_option("--step", gc_step, "Central-difference step");
    gc_cmd->add_option("--d", gc_d, "Model dimension");
    gc_cmd->add_option("--heads", gc_heads, "Attention heads");
    gc_cmd->add_option("--len", gc_len, "Utterances per dialog");
    gc_cmd->add_option("--classes", gc_classes, "Class count");
    gc_cmd->add_option("--dialogs", gc_dialogs, "Dialog count");
    gc_cmd->add_option("--seed", gc_seed, "RNG seed");
    gc_cmd->add_option("--system", gc_system, "System preset")
        ->check(CLI::IsMember({"S1", "S2", "S3", "S4", "S5"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            if (regime == "contextual") spec.regime = SynthRegime::Contextual;
            else if (regime == "contextual-speaker") spec.regime = SynthRegime::ContextualSpeaker;
            else spec.regime = SynthRegime::Pointwise;
            return cmd_synth(spec, synth_seed, test_frac, prefix);
        }

        if (train_cmd->parsed()) {
            tf.apply_config(train_cmd);
            std::filesystem::create_directories(out_dir);
            Dataset train_set = load_dataset(train_data);
            Dataset val_set;
            const bool have_val = !val_data.empty();
            if (have_val) val_set = load_dataset(val_data);
            std::vector<double> uas;
            for (int r = 0; r < repeats; ++r) {
                const std::string suffix =
                    repeats == 1 ? "" : "_seed" + std::to_string(tf.seed + r);
                RunOutcome out = run_training(tf, tf.seed + r, train_set,
                                              have_val ? &val_set : nullptr, out_dir, suffix,
                                              false);
                uas.push_back(out.ua);
            }
            if (repeats > 1) {
                MeanStd ms = mean_std(uas);
                std::cout << "UA over " << repeats << " seeds: mean=" << ms.mean
                          << " std=" << ms.std << "\n";
            }
            (void)threads;  // training parallelism not implemented; 1 is the contract
            return 0;
        }

        if (eval_cmd->parsed()) {
            Model model = load_checkpoint(eval_model);
            Dataset ds = load_dataset(eval_data);
            if (ds.meta.d_a != model.cfg.d_a || ds.meta.d_t != model.cfg.d_t ||
                ds.meta.d_s != model.cfg.d_s || ds.meta.num_classes != model.cfg.num_classes)
                throw DataError("dataset dims/classes do not match the checkpoint");
            Metrics m = evaluate_threaded(model, ds.dialogs, eval_threads);
            const std::string doc = metrics_to_json(m, ds.meta.class_names).dump(2) + "\n";
            write_text(eval_out, doc);
            std::cout << doc;
            if (!dump_attn.empty()) {
                std::ostringstream csv;
                const bool at = model.cfg.fusion_mode == FusionMode::AT;
                if (model.cfg.fusion_mode == FusionMode::ADD)
                    throw DataError("--dump-attn: ADD fusion has no attention weights");
                csv << (at ? "utt_id,alpha_a,alpha_t\n" : "utt_id,alpha_a,alpha_t,alpha_s\n");
                csv << std::setprecision(17);
                for (const auto& dlg : ds.dialogs) {
                    Tape tape;
                    BoundModel b = bind_model(tape, model);
                    ForwardResult fr = forward_dialog(tape, model, b, dlg, false);
                    for (size_t t = 0; t < fr.fusion_attn.size(); ++t) {
                        csv << dlg.id << "#" << t;
                        const Matrix& a = fr.fusion_attn[t];
                        for (int j = 0; j < a.cols(); ++j) csv << "," << a.at(0, j);
                        csv << "\n";
                    }
                }
                write_text(dump_attn, csv.str());
            }
            return 0;
        }

        if (ablate_cmd->parsed()) {
            af.apply_config(ablate_cmd);
            Dataset train_set = load_dataset(ab_train);
            Dataset test_set = load_dataset(ab_test);
            std::vector<std::string> systems;
            std::stringstream ss(ab_systems);
            for (std::string tok; std::getline(ss, tok, ',');)
                if (!tok.empty()) systems.push_back(tok);

            nlohmann::json report = nlohmann::json::array();
            std::cout << "System  Modalities  Fusion      Classifier  UA(%)\n";
            for (const auto& sys : systems) {
                const SystemPreset preset = system_preset(sys);
                HyperFlags hf = af;
                hf.system = sys;
                std::vector<double> uas;
                for (int r = 0; r < ab_repeats; ++r) {
                    Model model = Model::build(hf.model_config(train_set.meta), hf.seed + r);
                    TrainConfig tc = hf.train_config();
                    tc.seed = hf.seed + r;
                    tc.early_stop_patience = 0;
                    train(model, train_set.dialogs, nullptr, tc);
                    uas.push_back(evaluate(model, test_set.dialogs).unweighted_accuracy);
                }
                MeanStd ms = mean_std(uas);
                std::cout << std::left << std::setw(8) << preset.name << std::setw(12)
                          << preset.modalities << std::setw(12) << fusion_label(preset.fusion)
                          << std::setw(12) << classifier_label(preset.classifier) << std::fixed
                          << std::setprecision(2) << 100.0 * ms.mean;
                if (ab_repeats > 1) std::cout << " +/- " << 100.0 * ms.std;
                std::cout << std::defaultfloat << std::setprecision(6) << "\n";
                report.push_back({{"system", preset.name},
                                  {"modalities", preset.modalities},
                                  {"fusion", fusion_label(preset.fusion)},
                                  {"classifier", classifier_label(preset.classifier)},
                                  {"ua_mean", ms.mean},
                                  {"ua_std", ms.std},
                                  {"repeats", ab_repeats}});
            }
            if (!ab_out.empty()) write_text(ab_out, report.dump(2) + "\n");
            return 0;
        }

        if (gc_cmd->parsed()) {
            SynthSpec gspec;
            gspec.num_classes = gc_classes;
            gspec.d_a = 5;
            gspec.d_t = 4;
            gspec.d_s = 3;
            gspec.num_dialogs = gc_dialogs;
            gspec.len_min = gspec.len_max = gc_len;
            gspec.sigma = 0.3;
            Dataset ds = synth_dialogs(gspec, gc_seed);

            const SystemPreset preset = system_preset(gc_system);
            ModelConfig mc;
            mc.d = gc_d;
            mc.heads = gc_heads;
            mc.num_classes = gc_classes;
            mc.d_a = gspec.d_a;
            mc.d_t = gspec.d_t;
            mc.d_s = gspec.d_s;
            mc.fusion_mode = preset.fusion;
            mc.classifier_mode = preset.classifier;
            mc.dropout_p = 0.0;
            Model model = Model::build(mc, gc_seed);

            GradCheckReport report = check_model_gradients(model, ds.dialogs, gc_tol, gc_step);
            for (const auto& e : report.entries)
                std::cout << (e.passed ? "PASS " : "FAIL ") << std::left << std::setw(20)
                          << e.name << " max_rel_err=" << std::scientific
                          << std::setprecision(3) << e.max_rel_err << std::defaultfloat << "\n";
            std::cout << (report.all_passed ? "gradcheck PASSED" : "gradcheck FAILED")
                      << " (" << report.entries.size() << " tensors, tol=" << gc_tol << ")\n";
            return report.all_passed ? 0 : 3;
        }
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
