#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ehrseq/cohort.hpp"
#include "ehrseq/eval.hpp"
#include "ehrseq/metrics_io.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/run_config.hpp"
#include "ehrseq/tokenizer.hpp"
#include "ehrseq/train.hpp"

namespace fs = std::filesystem;
using namespace ehrseq;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "run";
    int64_t seed_override = -1;
};

RunConfig load_run_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : RunConfig::from_file(args.config_path);
    if (args.seed_override >= 0) {
        cfg.seed = uint64_t(args.seed_override);
        cfg.cohort.rng_seed = cfg.seed;
    }
    return cfg;
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir + "/config_resolved.txt");
    if (!out) throw DataError("cannot write config echo in " + out_dir);
    out << cfg.resolved_text();
}

Vocabulary require_vocab(const std::string& path) {
    if (!fs::exists(path)) throw DataError("missing vocabulary file: " + path + " (run `ehrseq vocab` first)");
    return Vocabulary::load_file(path);
}

Cohort require_cohort(const std::string& path) {
    if (!fs::exists(path)) throw DataError("missing cohort file: " + path + " (run `ehrseq gen` first)");
    return read_cohort_jsonl_file(path);
}

ModelParams require_checkpoint(const std::string& path, int expected_vocab) {
    if (!fs::exists(path)) throw DataError("missing checkpoint: " + path + " (run `ehrseq train` first)");
    Checkpoint ck = load_checkpoint(path);
    if (expected_vocab > 0 && ck.params.config.vocab_size != expected_vocab)
        throw DataError("checkpoint vocab_size does not match the vocabulary file");
    return std::move(ck.params);
}

ConditionLabelSet pick_condition(const std::vector<ConditionLabelSet>& sets,
                                 const std::string& name) {
    if (name.empty()) return sets.front();
    for (const auto& s : sets)
        if (s.name == name) return s;
    throw DataError("condition '" + name + "' not found in label-set file");
}

ResolvedLabelSet resolve_with_warning(const ConditionLabelSet& set, const Vocabulary& vocab) {
    ResolvedLabelSet resolved = resolve_label_set(set, vocab);
    for (const auto& key : resolved.unresolved)
        std::cerr << "warning: label code not in vocabulary, skipped: " << key << "\n";
    if (resolved.ids.empty())
        throw DataError("no label code of '" + set.name + "' resolves against the vocabulary");
    return resolved;
}

int cmd_gen(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);

    const Cohort cohort = generate_cohort(cfg.cohort);
    const CohortSplit split = split_cohort(cohort, cfg.split_fractions, cfg.seed);
    write_cohort_jsonl(cohort, args.out_dir + "/cohort.jsonl");
    write_cohort_jsonl(split.train, args.out_dir + "/cohort.train.jsonl");
    write_cohort_jsonl(split.val, args.out_dir + "/cohort.val.jsonl");
    write_cohort_jsonl(split.test, args.out_dir + "/cohort.test.jsonl");

    // one label set per planted effect code, for the evaluation commands
    if (!cfg.cohort.planted_rules.empty()) {
        std::vector<ConditionLabelSet> sets;
        for (const auto& rule : cfg.cohort.planted_rules) {
            const std::string key =
                (rule.effect_code[0] == 'M' ? "rx:" : "dx:") + rule.effect_code;
            bool seen = false;
            for (const auto& s : sets) seen = seen || s.token_keys[0] == key;
            if (!seen) sets.push_back({"cond_" + rule.effect_code, {key}});
        }
        save_label_sets(sets, args.out_dir + "/label_sets.tsv");
    }

    std::cout << "generated " << cohort.patients.size() << " patients (train "
              << split.train.patients.size() << ", val " << split.val.patients.size() << ", test "
              << split.test.patients.size() << ") -> " << args.out_dir << "\n";
    return 0;
}

int cmd_vocab(const CommonArgs& args, const std::string& cohort_path) {
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);
    const std::string path =
        cohort_path.empty() ? args.out_dir + "/cohort.train.jsonl" : cohort_path;

    const Cohort train = require_cohort(path);
    VocabBuildStats stats;
    const Vocabulary vocab = build_vocabulary(train, cfg.n_bins, &stats);
    for (const auto& code : stats.collapsed_codes)
        std::cerr << "warning: fewer than " << cfg.n_bins << " distinct values for " << code
                  << ", bins collapsed\n";
    vocab.save(args.out_dir + "/vocab.txt");
    std::cout << "vocabulary of " << vocab.size() << " tokens -> " << args.out_dir
              << "/vocab.txt\n";
    return 0;
}

struct PreparedData {
    Vocabulary vocab;
    std::vector<TokenizedTrajectory> train;
    std::vector<TokenizedTrajectory> val;
    std::vector<TokenizedTrajectory> test;
};

PreparedData prepare_data(const RunConfig& cfg, const std::string& out_dir, bool need_test) {
    PreparedData data;
    data.vocab = require_vocab(out_dir + "/vocab.txt");
    TokenizeStats stats;
    data.train = tokenize_cohort(require_cohort(out_dir + "/cohort.train.jsonl"), data.vocab, &stats);
    data.val = tokenize_cohort(require_cohort(out_dir + "/cohort.val.jsonl"), data.vocab, &stats);
    if (need_test)
        data.test = tokenize_cohort(require_cohort(out_dir + "/cohort.test.jsonl"), data.vocab, &stats);
    if (stats.dropped_unknown_events > 0)
        std::cerr << "note: dropped " << stats.dropped_unknown_events
                  << " events with unknown codes\n";
    if (stats.excluded_trajectories > 0)
        std::cerr << "note: excluded " << stats.excluded_trajectories
                  << " trajectories with < 2 tokenizable visits\n";
    (void)cfg;
    return data;
}

int cmd_train(const CommonArgs& args, const std::string& resume_path) {
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);

    PreparedData data = prepare_data(cfg, args.out_dir, false);
    cfg.model.vocab_size = data.vocab.size();
    cfg.model.validate();

    PackedDataset ds = build_packed_dataset(data.train, data.val, cfg);
    if (ds.stats.truncated_visits > 0)
        std::cerr << "warning: " << ds.stats.truncated_visits
                  << " oversized visits truncated to block_size-1\n";

    ModelParams params;
    AdamState opt_state;
    int64_t start_step = 0;
    bool resuming = false;
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        if (!ck.opt_state)
            throw DataError("resume checkpoint has no optimizer state: " + resume_path);
        if (!(ck.params.config == cfg.model))
            throw DataError("resume checkpoint config does not match run config");
        params = std::move(ck.params);
        opt_state = std::move(*ck.opt_state);
        start_step = ck.iter;
        resuming = true;
    } else {
        params = init_params(cfg.model, cfg.seed);
    }

    Trainer trainer(std::move(params), cfg, std::move(ds.train_rows), std::move(ds.val_rows));
    if (resuming) trainer.restore(std::move(opt_state), start_step);

    const TrainResult result = trainer.run(args.out_dir, &std::cout);
    std::cout << "trained " << result.steps_run << " steps; final train loss "
              << result.final_train_loss;
    if (result.best_val_loss)
        std::cout << "; best val loss " << *result.best_val_loss << " at step "
                  << result.best_val_step;
    std::cout << "\ncheckpoints -> " << args.out_dir << "/checkpoint_final.bin (and _best)\n";
    return 0;
}

struct PretrainEvalOutput {
    double threshold = 0.0;
    PrecisionRecall pr;
    OnTimeStats on_time;
    std::vector<SepPrediction> test_preds;
};

PretrainEvalOutput run_pretrain_eval(const ModelParams& params, const PreparedData& data,
                                     const ResolvedLabelSet& labels) {
    const auto val_rolling = score_trajectories(params, data.val, labels);
    const auto test_rolling = score_trajectories(params, data.test, labels);

    PretrainEvalOutput out;
    out.threshold = select_threshold(flatten_predictions(val_rolling));
    out.test_preds = flatten_predictions(test_rolling);
    out.pr = next_visit_precision_recall(out.test_preds, out.threshold);
    out.on_time = on_time_rate(test_rolling, out.threshold);
    return out;
}

int cmd_eval_pretrain(const CommonArgs& args, const std::string& checkpoint_path,
                      const std::string& label_set_path, const std::string& condition) {
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);

    PreparedData data = prepare_data(cfg, args.out_dir, true);
    const std::string ckpt =
        checkpoint_path.empty() ? args.out_dir + "/checkpoint_final.bin" : checkpoint_path;
    const ModelParams params = require_checkpoint(ckpt, data.vocab.size());
    const std::string lsp =
        label_set_path.empty() ? args.out_dir + "/label_sets.tsv" : label_set_path;
    const auto sets = load_label_sets(lsp);
    const std::string cond = condition.empty() ? cfg.condition : condition;
    const ResolvedLabelSet labels = resolve_with_warning(pick_condition(sets, cond), data.vocab);

    const PretrainEvalOutput out = run_pretrain_eval(params, data, labels);

    std::vector<MetricRecord> records;
    records.push_back({"threshold", out.threshold, {}, {}, int64_t(out.test_preds.size()),
                       {{"condition", labels.name}}});
    records.push_back({"next_visit_precision", out.pr.precision, {}, {},
                       out.pr.tp + out.pr.fp, {{"condition", labels.name}}});
    records.push_back({"next_visit_recall", out.pr.recall, {}, {}, out.pr.tp + out.pr.fn,
                       {{"condition", labels.name}}});
    records.push_back({"on_time_rate", out.on_time.rate, {}, {}, out.on_time.tp_total,
                       {{"condition", labels.name},
                        {"tp_on_time", std::to_string(out.on_time.tp_on_time)},
                        {"tp_total", std::to_string(out.on_time.tp_total)}}});
    write_metrics_jsonl(records, args.out_dir + "/metrics_pretrain.jsonl", cfg.config_hash());

    {
        std::vector<double> scores;
        std::vector<int> truth;
        for (const auto& p : out.test_preds) {
            scores.push_back(p.score);
            truth.push_back(p.truth ? 1 : 0);
        }
        bool has_pos = false;
        for (int t : truth) has_pos = has_pos || t == 1;
        if (has_pos)
            write_pr_curve(pr_curve(scores, truth), args.out_dir + "/pr_curve_pretrain.tsv",
                           cfg.config_hash());
    }

    std::cout << "condition " << labels.name << ": threshold " << out.threshold << ", precision "
              << (out.pr.precision ? std::to_string(*out.pr.precision) : "undefined")
              << ", recall "
              << (out.pr.recall ? std::to_string(*out.pr.recall) : "undefined")
              << ", on-time rate "
              << (out.on_time.rate ? std::to_string(*out.on_time.rate) : "undefined (no TP)")
              << " (TP " << out.on_time.tp_total << ")\n";
    return 0;
}

int cmd_sweep_delta(const CommonArgs& args, const std::vector<double>& deltas,
                    const std::string& label_set_path, const std::string& condition) {
    if (deltas.empty()) throw ConfigError("sweep-delta: need at least one delta");
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);

    PreparedData data = prepare_data(cfg, args.out_dir, true);
    cfg.model.vocab_size = data.vocab.size();
    cfg.model.validate();

    const std::string lsp =
        label_set_path.empty() ? args.out_dir + "/label_sets.tsv" : label_set_path;
    const auto sets = load_label_sets(lsp);
    const std::string cond = condition.empty() ? cfg.condition : condition;
    const ResolvedLabelSet labels = resolve_with_warning(pick_condition(sets, cond), data.vocab);

    std::ofstream summary(args.out_dir + "/sweep_summary.tsv");
    if (!summary) throw DataError("cannot write sweep summary in " + args.out_dir);
    summary << "# config_hash " << cfg.config_hash() << "\n";
    summary << "delta\tthreshold\tprecision\trecall\ton_time_rate\ttp_total\n";

    for (double delta : deltas) {
        RunConfig run_cfg = cfg;
        run_cfg.loss.delta = delta;
        run_cfg.loss.validate();
        const std::string sub_dir = args.out_dir + "/sweep/delta_" + format_double(delta);
        fs::create_directories(sub_dir);
        echo_config(run_cfg, sub_dir);

        // shared seed and data across deltas: only the loss weights differ
        PackedDataset ds = build_packed_dataset(data.train, data.val, run_cfg);
        Trainer trainer(init_params(run_cfg.model, run_cfg.seed), run_cfg,
                        std::move(ds.train_rows), std::move(ds.val_rows));
        std::cout << "sweep delta=" << delta << ": training " << run_cfg.opt.max_iters
                  << " steps\n";
        trainer.run(sub_dir, nullptr);

        const PretrainEvalOutput out = run_pretrain_eval(trainer.params(), data, labels);
        summary << format_double(delta) << "\t" << format_double(out.threshold) << "\t"
                << (out.pr.precision ? format_double(*out.pr.precision) : "nan") << "\t"
                << (out.pr.recall ? format_double(*out.pr.recall) : "nan") << "\t"
                << (out.on_time.rate ? format_double(*out.on_time.rate) : "nan") << "\t"
                << out.on_time.tp_total << "\n";
        summary.flush();
        std::cout << "sweep delta=" << delta << ": on-time rate "
                  << (out.on_time.rate ? std::to_string(*out.on_time.rate) : "undefined") << "\n";
    }
    std::cout << "sweep summary -> " << args.out_dir << "/sweep_summary.tsv\n";
    return 0;
}

int cmd_eval_zeroshot(const CommonArgs& args, const std::string& checkpoint_path,
                      const std::string& label_set_path, const std::string& condition) {
    RunConfig cfg = load_run_config(args);
    echo_config(cfg, args.out_dir);

    PreparedData data = prepare_data(cfg, args.out_dir, true);
    const std::string ckpt =
        checkpoint_path.empty() ? args.out_dir + "/checkpoint_final.bin" : checkpoint_path;
    const ModelParams params = require_checkpoint(ckpt, data.vocab.size());
    const std::string lsp =
        label_set_path.empty() ? args.out_dir + "/label_sets.tsv" : label_set_path;
    const auto sets = load_label_sets(lsp);
    const std::string cond = condition.empty() ? cfg.condition : condition;
    const ResolvedLabelSet labels = resolve_with_warning(pick_condition(sets, cond), data.vocab);

    std::vector<MetricRecord> records;
    for (int horizon : cfg.horizons_days) {
        CurationCounts counts;
        auto windows = curate_zero_shot_windows(data.test, labels, horizon, &counts);
        std::cout << "horizon " << horizon << "d: candidates " << counts.candidates
                  << ", included " << counts.included << " (excluded: history "
                  << counts.excluded_history << ", onset<1y " << counts.excluded_onset_1y
                  << ", follow-up " << counts.excluded_followup << ")\n";
        if (windows.empty())
            throw DataError("no curated windows at horizon " + std::to_string(horizon) +
                            "d; filter counts: history=" + std::to_string(counts.excluded_history) +
                            " onset1y=" + std::to_string(counts.excluded_onset_1y) +
                            " followup=" + std::to_string(counts.excluded_followup));

        std::vector<std::string> ids;
        std::vector<double> scores;
        std::vector<int> ys;
        for (auto& w : windows) {
            const auto& traj = *std::find_if(data.test.begin(), data.test.end(),
                                             [&](const auto& t) { return t.patient_id == w.patient_id; });
            w.score = condition_score(params, traj, w, labels, cfg.query_grid_size);
            ids.push_back(w.patient_id);
            scores.push_back(w.score);
            ys.push_back(w.label);
        }

        const std::string h = std::to_string(horizon);
        const std::string cond_h = labels.name + "@" + h + "d";
        const auto roc = auroc(scores, ys);
        const auto prc = auprc(scores, ys);
        const auto roc_ci = bootstrap_ci(ids, scores, ys, auroc, cfg.bootstrap_resamples,
                                         cfg.seed ^ uint64_t(horizon));
        const auto prc_ci = bootstrap_ci(ids, scores, ys, auprc, cfg.bootstrap_resamples,
                                         cfg.seed ^ uint64_t(horizon) ^ 0x9e37ULL);
        records.push_back({"zeroshot_auroc", roc, roc_ci.lo, roc_ci.hi, int64_t(ys.size()),
                           {{"condition", cond_h}}});
        records.push_back({"zeroshot_auprc", prc, prc_ci.lo, prc_ci.hi, int64_t(ys.size()),
                           {{"condition", cond_h}}});
        records.push_back({"zeroshot_windows", double(counts.included), {}, {}, counts.candidates,
                           {{"condition", cond_h},
                            {"excluded_history", std::to_string(counts.excluded_history)},
                            {"excluded_onset_1y", std::to_string(counts.excluded_onset_1y)},
                            {"excluded_followup", std::to_string(counts.excluded_followup)}}});
        write_pr_curve(pr_curve(scores, ys),
                       args.out_dir + "/pr_curve_zeroshot_" + h + "d.tsv", cfg.config_hash());
        std::cout << "horizon " << horizon << "d: AUROC " << roc << " (" << roc_ci.lo << ", "
                  << roc_ci.hi << "), AUPRC " << prc << " (" << prc_ci.lo << ", " << prc_ci.hi
                  << ") over " << ys.size() << " windows\n";
    }
    write_metrics_jsonl(records, args.out_dir + "/metrics_zeroshot.jsonl", cfg.config_hash());
    return 0;
}

int cmd_dump_mask(const CommonArgs& args, const std::vector<int>& visit_sizes,
                  const std::string& mode_name, const std::string& out_file) {
    if (visit_sizes.empty()) throw ConfigError("dump-mask: need visit sizes");
    PackMode mode;
    if (mode_name == "cross") mode = PackMode::cross;
    else if (mode_name == "isolated") mode = PackMode::isolated;
    else throw ConfigError("dump-mask: mode must be cross or isolated");

    TokenizedTrajectory traj;
    traj.patient_id = "debug";
    int64_t t = 0;
    for (int s : visit_sizes) {
        if (s < 1) throw ConfigError("dump-mask: visit sizes must be >= 1");
        TokenizedVisit v;
        v.time_days = t;
        for (int i = 0; i < s; ++i) v.token_ids.push_back(kSepId + 1 + i);
        traj.visits.push_back(v);
        t += 30;
    }
    const auto seq = assign_positions(traj);
    const auto mask = build_attention_mask(seq, mode);

    fs::create_directories(args.out_dir);
    const std::string path = out_file.empty() ? args.out_dir + "/mask.txt" : out_file;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write mask grid: " + path);
    out << mask_to_grid(mask);
    std::cout << "mask " << mask.n << "x" << mask.n << " -> " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"generative pretraining on longitudinal clinical-event sequences"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("--config", common.config_path, "run configuration file (key = value lines)");
    app.add_option("--out", common.out_dir, "run directory for artifacts");
    app.add_option("--seed", common.seed_override, "override the config seed");

    auto* gen = app.add_subcommand("gen", "generate a synthetic cohort and its splits");

    std::string cohort_path;
    auto* vocab = app.add_subcommand("vocab", "build the vocabulary from the train split");
    vocab->add_option("--cohort", cohort_path, "train-split cohort file (default from --out)");

    std::string resume_path;
    auto* train = app.add_subcommand("train", "pretrain the next-visit model");
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    std::string ckpt_path, label_set_path, condition;
    auto* evalp = app.add_subcommand("eval-pretrain",
                                     "threshold, precision/recall and on-time rate on the test split");
    evalp->add_option("--checkpoint", ckpt_path, "checkpoint file");
    evalp->add_option("--label-set", label_set_path, "label-set table (disease/type/description/code)");
    evalp->add_option("--condition", condition, "condition name within the label-set file");

    std::vector<double> deltas{1.0, 0.75, 0.5, 0.25};
    auto* sweep = app.add_subcommand("sweep-delta", "train and evaluate across decay factors");
    sweep->add_option("--deltas", deltas, "decay factors to sweep");
    sweep->add_option("--label-set", label_set_path, "label-set table");
    sweep->add_option("--condition", condition, "condition name within the label-set file");

    auto* zeroshot = app.add_subcommand("eval-zeroshot",
                                        "curated-window AUROC/AUPRC with bootstrap CIs");
    zeroshot->add_option("--checkpoint", ckpt_path, "checkpoint file");
    zeroshot->add_option("--label-set", label_set_path, "label-set table");
    zeroshot->add_option("--condition", condition, "condition name within the label-set file");

    std::vector<int> visit_sizes;
    std::string mask_mode = "isolated", mask_out;
    auto* dump = app.add_subcommand("dump-mask", "write a visit-block attention mask as a 0/1 grid");
    dump->add_option("--visits", visit_sizes, "token count per visit")->required();
    dump->add_option("--mode", mask_mode, "cross or isolated");
    dump->add_option("--file", mask_out, "output file (default <out>/mask.txt)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(common);
        if (vocab->parsed()) return cmd_vocab(common, cohort_path);
        if (train->parsed()) return cmd_train(common, resume_path);
        if (evalp->parsed()) return cmd_eval_pretrain(common, ckpt_path, label_set_path, condition);
        if (sweep->parsed()) return cmd_sweep_delta(common, deltas, label_set_path, condition);
        if (zeroshot->parsed()) return cmd_eval_zeroshot(common, ckpt_path, label_set_path, condition);
        if (dump->parsed()) return cmd_dump_mask(common, visit_sizes, mask_mode, mask_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
