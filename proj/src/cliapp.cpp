#include "cal3/cliapp.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>

#include <CLI11.hpp>

#include "cal3/checkpoint.hpp"
#include "cal3/config.hpp"
#include "cal3/errors.hpp"
#include "cal3/eval.hpp"
#include "cal3/io.hpp"
#include "cal3/trainer.hpp"

namespace cal3 {

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

TrainConfig pretrain_defaults() {
    TrainConfig cfg;
    cfg.steps = 500;
    cfg.warmup_steps = 50;
    return cfg;
}

// Run configuration: one strict JSON file with per-command sections plus
// flag overrides; the resolved result is echoed into the output directory.
struct RunConfig {
    std::uint64_t seed = 7;
    DataConfig data;
    TrainConfig train;
    TrainConfig pretrain = pretrain_defaults();
    EvalConfig eval;

    ordered_json to_json() const {
        ordered_json j;
        j["seed"] = seed;
        j["data"] = data.to_json();
        j["train"] = train.to_json();
        j["pretrain"] = pretrain.to_json();
        j["eval"] = eval.to_json();
        return j;
    }
};

RunConfig load_run_config(const std::string& path) {
    RunConfig run;
    if (path.empty()) {
        run.train.seed = run.seed;
        run.pretrain.seed = run.seed;
        return run;
    }
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    require_known_keys(j, {"seed", "data", "train", "pretrain", "eval"}, "config");
    if (j.contains("seed")) run.seed = j.at("seed").get<std::uint64_t>();
    run.train.seed = run.seed;
    run.pretrain.seed = run.seed;
    if (j.contains("data")) run.data = DataConfig::from_json(j.at("data"));
    if (j.contains("train")) run.train = TrainConfig::from_json(j.at("train"), run.train);
    if (j.contains("pretrain")) run.pretrain = TrainConfig::from_json(j.at("pretrain"), run.pretrain);
    if (j.contains("eval")) run.eval = EvalConfig::from_json(j.at("eval"));
    return run;
}

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory '" + out + "': " + ec.message());
}

void echo_config(const std::string& out, const std::string& command, const RunConfig& run,
                 const ordered_json& paths) {
    ordered_json j;
    j["command"] = command;
    j["paths"] = paths;
    j.update(run.to_json());
    write_text_file((fs::path(out) / "resolved_config.json").string(), j.dump(2) + "\n");
}

ordered_json mean_sem_json(double mean, double sem) {
    ordered_json j;
    if (std::isnan(mean)) return nullptr;
    j["mean"] = mean;
    j["sem"] = sem;
    return j;
}

struct SeedStats {
    std::vector<double> values;
    void add(double v) {
        if (!std::isnan(v)) values.push_back(v);
    }
    ordered_json json() const {
        if (values.empty()) return nullptr;
        double mean = 0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double sem = 0;
        if (values.size() > 1) {
            double var = 0;
            for (double v : values) var += (v - mean) * (v - mean);
            var /= static_cast<double>(values.size() - 1);
            sem = std::sqrt(var / static_cast<double>(values.size()));
        }
        return mean_sem_json(mean, sem);
    }
};

int cmd_generate(const RunConfig& run, const std::string& out, bool force) {
    if (fs::exists(out) && !fs::is_empty(out) && !force)
        throw IoError("output directory '" + out + "' is not empty; pass --force to overwrite");
    ensure_out_dir(out);
    auto ds = generate_dataset(run.seed, run.data.cases, run.data.gen);
    save_dataset(out, ds);
    ordered_json paths;
    paths["out"] = out;
    echo_config(out, "generate", run, paths);
    std::cout << "generated " << ds.cases.size() << " cases (" << ds.train_indices.size() << " train / "
              << ds.test_indices.size() << " test) under " << out << "\n";
    return kExitOk;
}

int cmd_pretrain(const RunConfig& run, const std::string& dataset_dir, const std::string& out) {
    ensure_out_dir(out);
    auto ds = load_dataset(dataset_dir);
    TrainOptions options;
    options.checkpoint_path = (fs::path(out) / "pretrain.cal3").string();
    auto result = pretrain_mae(run.pretrain, ds, options);
    write_text_file((fs::path(out) / "metrics.csv").string(), metrics_csv(result.log));
    ordered_json paths;
    paths["dataset"] = dataset_dir;
    paths["out"] = out;
    echo_config(out, "pretrain", run, paths);
    std::cout << "pretrained image tower for " << run.pretrain.steps << " steps -> "
              << options.checkpoint_path << "\n";
    return kExitOk;
}

int cmd_train(const RunConfig& run, const std::string& dataset_dir, const std::string& out,
              const std::string& init_image_path) {
    ensure_out_dir(out);
    auto ds = load_dataset(dataset_dir);

    TrainOptions options;
    options.checkpoint_path = (fs::path(out) / "checkpoint.cal3").string();
    std::optional<Checkpoint> init_ckpt;
    if (!init_image_path.empty()) {
        init_ckpt = Checkpoint::load(init_image_path);
        options.init_image_from = &*init_ckpt;
    }

    ordered_json paths;
    paths["dataset"] = dataset_dir;
    paths["out"] = out;
    if (!init_image_path.empty()) paths["init_image_encoder"] = init_image_path;
    echo_config(out, "train", run, paths);

    TrainResult result;
    try {
        result = train(run.train, ds, options);
    } catch (const DivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    }
    write_text_file((fs::path(out) / "metrics.csv").string(), metrics_csv(result.log));
    Vocabulary vocab(result.checkpoint.vocab_words);
    write_text_file((fs::path(out) / "vocab.txt").string(), vocab.to_text());
    std::cout << "trained " << run.train.steps << " steps -> " << options.checkpoint_path << "\n";
    return kExitOk;
}

ordered_json region_map(const std::array<SeedStats, kNumRegions>& stats) {
    ordered_json j;
    for (int r = 0; r < kNumRegions; ++r)
        j[region_name(static_cast<Region>(r))] = stats[static_cast<std::size_t>(r)].json();
    return j;
}

int cmd_eval(const RunConfig& run, const std::string& dataset_dir, const std::string& checkpoint_path,
             const std::string& out) {
    ensure_out_dir(out);
    auto ds = load_dataset(dataset_dir);
    auto ckpt = Checkpoint::load(checkpoint_path);
    if (ckpt.phase != "align")
        throw LoadError("eval: checkpoint phase is '" + ckpt.phase + "', need an alignment checkpoint");
    auto model = model_from_checkpoint(ckpt);
    if (ds.test_indices.empty()) throw ContractError("eval: dataset has no test split");
    if (!ds.cases.empty() && model.config.patch_size > ds.cases[0].volume.size)
        throw LoadError("eval: checkpoint patch size exceeds dataset volume size");

    auto labels = label_sets(ds, ds.test_indices);

    std::array<SeedStats, kNumRegions> auc_region;
    SeedStats auc_avg, mrr, map, acc;
    std::array<SeedStats, kNumRegions> rr_region, ap_region, acc_region;
    std::vector<Region> skipped_auc, skipped_ret;
    std::string embeddings_out;

    for (int s = 0; s < run.eval.seeds; ++s) {
        std::uint64_t aug_seed = s == 0 ? 0 : mix_seed(run.seed, static_cast<std::uint64_t>(s));
        auto emb = embed_cases(model, ds, ds.test_indices, aug_seed);
        if (s == 0 && run.eval.export_embeddings)
            embeddings_out = embeddings_csv(emb, ds.test_indices, labels);

        auto auc = auc_ovr(classify_zero_shot(emb), labels);
        auc_avg.add(auc.average);
        for (int r = 0; r < kNumRegions; ++r)
            auc_region[static_cast<std::size_t>(r)].add(auc.per_region[static_cast<std::size_t>(r)]);
        if (s == 0) skipped_auc = auc.skipped;

        std::vector<Ranking> rankings;
        for (Region r : all_regions()) rankings.push_back(retrieve(r, emb, labels));
        auto rm = retrieval_metrics(rankings);
        mrr.add(rm.mrr);
        map.add(rm.map);
        acc.add(rm.accuracy);
        for (int r = 0; r < kNumRegions; ++r) {
            rr_region[static_cast<std::size_t>(r)].add(rm.per_rr[static_cast<std::size_t>(r)]);
            ap_region[static_cast<std::size_t>(r)].add(rm.per_ap[static_cast<std::size_t>(r)]);
            acc_region[static_cast<std::size_t>(r)].add(rm.per_acc[static_cast<std::size_t>(r)]);
        }
        if (s == 0) skipped_ret = rm.skipped;
    }

    Rng baseline_rng(mix_seed(run.seed, 0xBA5Eull));
    auto baseline = random_baseline(labels, baseline_rng, run.eval.baseline_repeats);

    ordered_json report;
    report["num_test_cases"] = ds.test_indices.size();
    report["seeds"] = run.eval.seeds;
    {
        ordered_json cls;
        ordered_json auc_json = region_map(auc_region);
        auc_json["average"] = auc_avg.json();
        cls["auc"] = auc_json;
        ordered_json skipped = ordered_json::array();
        for (Region r : skipped_auc) skipped.push_back(region_name(r));
        cls["skipped_regions"] = skipped;
        report["classification"] = cls;
    }
    {
        ordered_json ret;
        ret["mrr"] = mrr.json();
        ret["map"] = map.json();
        ret["accuracy"] = acc.json();
        ordered_json per;
        for (int r = 0; r < kNumRegions; ++r) {
            ordered_json one;
            one["rr"] = rr_region[static_cast<std::size_t>(r)].json();
            one["ap"] = ap_region[static_cast<std::size_t>(r)].json();
            one["accuracy"] = acc_region[static_cast<std::size_t>(r)].json();
            per[region_name(static_cast<Region>(r))] = one;
        }
        ret["per_region"] = per;
        ordered_json skipped = ordered_json::array();
        for (Region r : skipped_ret) skipped.push_back(region_name(r));
        ret["skipped_regions"] = skipped;
        report["retrieval"] = ret;
    }
    {
        ordered_json rb;
        rb["repeats"] = baseline.repeats;
        rb["auc"] = mean_sem_json(baseline.auc.mean, baseline.auc.sem);
        rb["mrr"] = mean_sem_json(baseline.mrr.mean, baseline.mrr.sem);
        rb["map"] = mean_sem_json(baseline.map.mean, baseline.map.sem);
        rb["accuracy"] = mean_sem_json(baseline.accuracy.mean, baseline.accuracy.sem);
        report["random_baseline"] = rb;
    }

    write_text_file((fs::path(out) / "report.json").string(), report.dump(2) + "\n");
    if (!embeddings_out.empty())
        write_text_file((fs::path(out) / "embeddings.csv").string(), embeddings_out);

    ordered_json paths;
    paths["dataset"] = dataset_dir;
    paths["checkpoint"] = checkpoint_path;
    paths["out"] = out;
    echo_config(out, "eval", run, paths);
    std::cout << "evaluation report -> " << (fs::path(out) / "report.json").string() << "\n";
    return kExitOk;
}

int cmd_embed(const RunConfig& run, const std::string& dataset_dir, const std::string& checkpoint_path,
              const std::string& out) {
    ensure_out_dir(out);
    auto ds = load_dataset(dataset_dir);
    auto ckpt = Checkpoint::load(checkpoint_path);
    if (ckpt.phase != "align")
        throw LoadError("embed: checkpoint phase is '" + ckpt.phase + "', need an alignment checkpoint");
    auto model = model_from_checkpoint(ckpt);

    std::vector<int> indices(ds.cases.size());
    for (std::size_t i = 0; i < ds.cases.size(); ++i) indices[i] = static_cast<int>(i);
    auto labels = label_sets(ds, indices);
    auto emb = embed_cases(model, ds, indices);
    write_text_file((fs::path(out) / "embeddings.csv").string(), embeddings_csv(emb, indices, labels));

    ordered_json paths;
    paths["dataset"] = dataset_dir;
    paths["checkpoint"] = checkpoint_path;
    paths["out"] = out;
    echo_config(out, "embed", run, paths);
    std::cout << "embeddings -> " << (fs::path(out) / "embeddings.csv").string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"cal3: contrastive alignment of 3D volumes with tabular-data sentences"};
    app.require_subcommand(1);

    std::string config_path, out_dir, dataset_dir, checkpoint_path, init_image_path;
    std::uint64_t seed_flag = 0;
    bool seed_given = false, force = false;
    int cases_flag = 0, seeds_flag = 0;
    long long steps_flag = -1;
    int accum_flag = 0;
    bool export_embeddings = false;

    auto add_shared = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration JSON");
        cmd->add_option("--seed", seed_flag, "master seed")->each([&](const std::string&) { seed_given = true; });
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_flag("--force", force, "overwrite non-empty output directories");
    };

    auto* generate = app.add_subcommand("generate", "write a synthetic dataset directory");
    add_shared(generate);
    generate->add_option("--cases", cases_flag, "number of cases");

    auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining of the image tower");
    add_shared(pretrain);
    pretrain->add_option("--dataset", dataset_dir, "dataset directory")->required();
    pretrain->add_option("--steps", steps_flag, "optimizer steps");

    auto* train_cmd = app.add_subcommand("train", "contrastive alignment training");
    add_shared(train_cmd);
    train_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
    train_cmd->add_option("--steps", steps_flag, "optimizer steps");
    train_cmd->add_option("--accum-freq", accum_flag, "accumulation frequency N");
    train_cmd->add_option("--init-image-encoder", init_image_path, "pretrained image-tower checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "zero-shot classification and retrieval report");
    add_shared(eval_cmd);
    eval_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
    eval_cmd->add_option("--checkpoint", checkpoint_path, "alignment checkpoint")->required();
    eval_cmd->add_option("--seeds", seeds_flag, "evaluation repeats");
    eval_cmd->add_flag("--export-embeddings", export_embeddings, "also write embeddings.csv");

    auto* embed = app.add_subcommand("embed", "export image and sentence embeddings as CSV");
    add_shared(embed);
    embed->add_option("--dataset", dataset_dir, "dataset directory")->required();
    embed->add_option("--checkpoint", checkpoint_path, "alignment checkpoint")->required();

    std::vector<std::string> argv_list = args;
    argv_list.insert(argv_list.begin(), "cal3");
    std::vector<char*> argv;
    for (auto& a : argv_list) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        RunConfig run = load_run_config(config_path);
        if (seed_given) {
            run.seed = seed_flag;
            run.train.seed = seed_flag;
            run.pretrain.seed = seed_flag;
        }
        if (cases_flag > 0) run.data.cases = cases_flag;
        if (cases_flag != 0 && cases_flag < 5)
            throw ConfigError("generate: need at least 5 cases for the 80/20 split");
        if (steps_flag >= 0) {
            run.train.steps = steps_flag;
            run.pretrain.steps = steps_flag;
            if (run.train.warmup_steps >= run.train.steps)
                run.train.warmup_steps = std::max<std::int64_t>(0, run.train.steps / 20);
            if (run.pretrain.warmup_steps >= run.pretrain.steps)
                run.pretrain.warmup_steps = std::max<std::int64_t>(0, run.pretrain.steps / 20);
        }
        if (accum_flag > 0) run.train.accum_freq = accum_flag;
        if (seeds_flag > 0) run.eval.seeds = seeds_flag;
        if (export_embeddings) run.eval.export_embeddings = true;
        run.train.validate();
        run.pretrain.validate();

        if (generate->parsed()) return cmd_generate(run, out_dir, force);
        if (pretrain->parsed()) return cmd_pretrain(run, dataset_dir, out_dir);
        if (train_cmd->parsed()) return cmd_train(run, dataset_dir, out_dir, init_image_path);
        if (eval_cmd->parsed()) return cmd_eval(run, dataset_dir, checkpoint_path, out_dir);
        if (embed->parsed()) return cmd_embed(run, dataset_dir, checkpoint_path, out_dir);
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergedError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
}

}  // namespace cal3
