#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cal3/checkpoint.hpp"
#include "cal3/cliapp.hpp"
#include "cal3/io.hpp"

using namespace cal3;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cal3_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const { return (sub.empty() ? path : path / sub).string(); }
};

std::vector<std::uint8_t> slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// small-but-complete run config for fast CLI tests
void write_mini_config(const std::string& path) {
    json cfg;
    cfg["seed"] = 7;
    cfg["data"]["cases"] = 20;
    cfg["data"]["volume_size"] = 16;
    cfg["train"]["steps"] = 4;
    cfg["train"]["warmup_steps"] = 1;
    cfg["train"]["batch_size"] = 2;
    cfg["train"]["accum_freq"] = 2;
    cfg["train"]["embed_dim"] = 8;
    cfg["train"]["patch_size"] = 8;
    cfg["train"]["image_channels"] = {2, 4};
    cfg["train"]["text_width"] = 8;
    cfg["pretrain"]["steps"] = 4;
    cfg["pretrain"]["warmup_steps"] = 1;
    cfg["pretrain"]["batch_size"] = 2;
    cfg["pretrain"]["accum_freq"] = 2;
    cfg["pretrain"]["embed_dim"] = 8;
    cfg["pretrain"]["patch_size"] = 8;
    cfg["pretrain"]["image_channels"] = {2, 4};
    cfg["pretrain"]["text_width"] = 8;
    cfg["eval"]["baseline_repeats"] = 20;
    write_text_file(path, cfg.dump(2));
}

}  // namespace

TEST_CASE("generate writes the declared layout and is byte-reproducible") {
    TempDir tmp("gen");
    auto ds_dir = tmp.str("ds");
    CHECK(run_cli({"generate", "--cases", "10", "--seed", "7", "--out", ds_dir}) == 0);

    int case_dirs = 0;
    for (auto& e : fs::directory_iterator(ds_dir))
        if (e.is_directory()) ++case_dirs;
    CHECK(case_dirs == 10);
    CHECK(fs::exists(fs::path(ds_dir) / "split.json"));
    CHECK(fs::exists(fs::path(ds_dir) / "resolved_config.json"));
    CHECK(fs::exists(fs::path(ds_dir) / "case_0003" / "volume.f32"));
    CHECK(fs::exists(fs::path(ds_dir) / "case_0003" / "shape.txt"));
    CHECK(fs::exists(fs::path(ds_dir) / "case_0003" / "record.json"));

    auto split = json::parse(read_text_file((fs::path(ds_dir) / "split.json").string()));
    int train_n = 0, test_n = 0;
    for (auto& [k, v] : split.items()) (v == "train" ? train_n : test_n) += 1;
    CHECK(train_n == 8);
    CHECK(test_n == 2);

    // refusal without --force, byte-identical rerun with it
    CHECK(run_cli({"generate", "--cases", "10", "--seed", "7", "--out", ds_dir}) == 4);
    auto before = slurp((fs::path(ds_dir) / "case_0002" / "volume.f32").string());
    CHECK(run_cli({"generate", "--cases", "10", "--seed", "7", "--out", ds_dir, "--force"}) == 0);
    CHECK(slurp((fs::path(ds_dir) / "case_0002" / "volume.f32").string()) == before);

    // split minimum is a config error
    CHECK(run_cli({"generate", "--cases", "4", "--seed", "7", "--out", tmp.str("tiny")}) == 2);
}

TEST_CASE("round trip: generated dataset loads back identically") {
    TempDir tmp("roundtrip");
    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--cases", "8", "--seed", "3", "--out", ds_dir}) == 0);
    auto ds = load_dataset(ds_dir);
    CHECK(ds.cases.size() == 8);
    CHECK(ds.train_indices.size() == 6);
    CHECK(ds.test_indices.size() == 2);
    auto direct = generate_dataset(3, 8, GenConfig());
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(ds.cases[i].volume.voxels == direct.cases[i].volume.voxels);
        CHECK(ds.cases[i].record.lesions == direct.cases[i].record.lesions);
    }
    CHECK(ds.train_indices == direct.train_indices);
}

TEST_CASE("train then eval: artifacts, schema, and exit codes") {
    TempDir tmp("train");
    auto cfg_path = tmp.str("run.json");
    write_mini_config(cfg_path);
    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--config", cfg_path, "--out", ds_dir}) == 0);

    auto run1 = tmp.str("run1");
    CHECK(run_cli({"train", "--config", cfg_path, "--dataset", ds_dir, "--out", run1}) == 0);
    CHECK(fs::exists(fs::path(run1) / "checkpoint.cal3"));
    CHECK(fs::exists(fs::path(run1) / "metrics.csv"));
    CHECK(fs::exists(fs::path(run1) / "vocab.txt"));
    CHECK(fs::exists(fs::path(run1) / "resolved_config.json"));

    // different accumulation frequencies both complete
    auto run_n1 = tmp.str("run_n1");
    CHECK(run_cli({"train", "--config", cfg_path, "--dataset", ds_dir, "--out", run_n1, "--accum-freq",
                   "1"}) == 0);

    auto eval_dir = tmp.str("eval");
    CHECK(run_cli({"eval", "--config", cfg_path, "--dataset", ds_dir, "--checkpoint",
                   (fs::path(run1) / "checkpoint.cal3").string(), "--out", eval_dir, "--seeds", "2",
                   "--export-embeddings"}) == 0);
    auto report = json::parse(read_text_file((fs::path(eval_dir) / "report.json").string()));
    auto& auc = report.at("classification").at("auc");
    CHECK(auc.size() == 6);  // five regions plus average
    for (const char* key : {"frontal", "parietal", "temporal", "occipital", "cerebellar", "average"})
        CHECK(auc.contains(key));
    for (auto& [k, v] : auc.items())
        if (!v.is_null()) CHECK(v.contains("sem"));
    CHECK(report.at("retrieval").at("mrr").contains("sem"));
    CHECK(report.at("random_baseline").at("auc").contains("mean"));
    CHECK(fs::exists(fs::path(eval_dir) / "embeddings.csv"));

    auto embed_dir = tmp.str("embed");
    CHECK(run_cli({"embed", "--config", cfg_path, "--dataset", ds_dir, "--checkpoint",
                   (fs::path(run1) / "checkpoint.cal3").string(), "--out", embed_dir}) == 0);
    CHECK(fs::exists(fs::path(embed_dir) / "embeddings.csv"));
}

TEST_CASE("steps 0 writes an init-only checkpoint through the CLI") {
    TempDir tmp("steps0");
    auto cfg_path = tmp.str("run.json");
    write_mini_config(cfg_path);
    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--config", cfg_path, "--out", ds_dir}) == 0);
    auto out = tmp.str("init_only");
    CHECK(run_cli({"train", "--config", cfg_path, "--dataset", ds_dir, "--out", out, "--steps", "0"}) == 0);
    auto ckpt = Checkpoint::load((fs::path(out) / "checkpoint.cal3").string());
    CHECK(ckpt.step == 0);
}

TEST_CASE("pretrain hands its checkpoint to train") {
    TempDir tmp("pre");
    auto cfg_path = tmp.str("run.json");
    write_mini_config(cfg_path);
    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--config", cfg_path, "--out", ds_dir}) == 0);

    auto pre_dir = tmp.str("pre");
    CHECK(run_cli({"pretrain", "--config", cfg_path, "--dataset", ds_dir, "--out", pre_dir}) == 0);
    auto pre_ckpt = (fs::path(pre_dir) / "pretrain.cal3").string();
    CHECK(Checkpoint::load(pre_ckpt).phase == "pretrain");

    auto out = tmp.str("aligned");
    CHECK(run_cli({"train", "--config", cfg_path, "--dataset", ds_dir, "--out", out,
                   "--init-image-encoder", pre_ckpt}) == 0);

    // mismatched image tower is a load error -> I/O exit code
    json cfg = json::parse(read_text_file(cfg_path));
    cfg["train"]["image_channels"] = {3, 4};
    auto cfg2 = tmp.str("run2.json");
    write_text_file(cfg2, cfg.dump(2));
    CHECK(run_cli({"train", "--config", cfg2, "--dataset", ds_dir, "--out", tmp.str("bad"),
                   "--init-image-encoder", pre_ckpt}) == 4);
}

TEST_CASE("strict config parsing rejects unknown keys") {
    TempDir tmp("strict");
    auto cfg_path = tmp.str("bad.json");
    write_text_file(cfg_path, R"({"seed": 1, "trian": {"steps": 10}})");
    CHECK(run_cli({"generate", "--config", cfg_path, "--out", tmp.str("ds")}) == 2);

    auto cfg2 = tmp.str("bad2.json");
    write_text_file(cfg2, R"({"train": {"learning_rate": 0.1}})");
    CHECK(run_cli({"generate", "--config", cfg2, "--out", tmp.str("ds2")}) == 2);

    auto cfg3 = tmp.str("notjson.json");
    write_text_file(cfg3, "steps: 10\n");
    CHECK(run_cli({"generate", "--config", cfg3, "--out", tmp.str("ds3")}) == 2);

    CHECK(run_cli({"frobnicate", "--out", tmp.str("x")}) == 2);
    CHECK(run_cli({"train", "--out", tmp.str("y")}) == 2);  // missing --dataset
}

TEST_CASE("missing dataset is an I/O error") {
    TempDir tmp("io");
    CHECK(run_cli({"train", "--dataset", tmp.str("nope"), "--out", tmp.str("out"), "--steps", "1"}) == 4);
}

TEST_CASE("a run hot enough to blow up exits with the divergence code") {
    TempDir tmp("div");
    auto cfg_path = tmp.str("run.json");
    json cfg;
    cfg["seed"] = 7;
    cfg["data"]["cases"] = 8;
    cfg["data"]["volume_size"] = 16;
    cfg["train"]["steps"] = 40;
    cfg["train"]["warmup_steps"] = 1;
    cfg["train"]["batch_size"] = 2;
    cfg["train"]["accum_freq"] = 1;
    cfg["train"]["embed_dim"] = 8;
    cfg["train"]["patch_size"] = 8;
    cfg["train"]["image_channels"] = {2, 4};
    cfg["train"]["text_width"] = 8;
    cfg["train"]["lr_vision"] = 1e18;
    cfg["train"]["lr_text"] = 1e17;
    cfg["train"]["weight_decay"] = 0.0;
    write_text_file(cfg_path, cfg.dump(2));

    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--config", cfg_path, "--out", ds_dir}) == 0);
    auto out = tmp.str("out");
    CHECK(run_cli({"train", "--config", cfg_path, "--dataset", ds_dir, "--out", out}) == 3);
    CHECK(fs::exists(fs::path(out) / "checkpoint.cal3.diverged"));
}

TEST_CASE("resolved config echo is reusable provenance") {
    TempDir tmp("echo");
    auto cfg_path = tmp.str("run.json");
    write_mini_config(cfg_path);
    auto ds_dir = tmp.str("ds");
    REQUIRE(run_cli({"generate", "--config", cfg_path, "--seed", "19", "--out", ds_dir}) == 0);
    auto echoed = json::parse(read_text_file((fs::path(ds_dir) / "resolved_config.json").string()));
    CHECK(echoed.at("seed") == 19);
    CHECK(echoed.at("command") == "generate");
    CHECK(echoed.at("data").at("cases") == 20);
    CHECK(echoed.at("train").at("seed") == 19);
}
