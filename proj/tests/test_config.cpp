#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "malm/cli.hpp"
#include "malm/common.hpp"
#include "malm/config.hpp"

using namespace malm;

TEST_SUITE("config") {

TEST_CASE("defaults cover the documented keys") {
    RunConfig cfg = RunConfig::defaults();
    CHECK(cfg.get_real("mask_ratio") == doctest::Approx(0.75));
    CHECK(cfg.get_real("beta") == doctest::Approx(1.0));
    CHECK(cfg.get_real("ema_momentum") == doctest::Approx(0.999));
    CHECK(cfg.get_real("temperature_init") == doctest::Approx(0.07));
    CHECK(cfg.get_bool("normalize_features"));
    CHECK(cfg.get_bool("literal_eq7_denominator"));
    CHECK_FALSE(cfg.get_bool("literal_sum_loss"));
    CHECK(cfg.get_int("matching_depth") == 4);
    CHECK(cfg.get_int("matching_heads") == 4);
    CHECK(cfg.get_real("triplet_margin") == doctest::Approx(0.3));
    CHECK(cfg.provenance("mask_ratio") == Provenance::Default);
}

TEST_CASE("unknown keys are an error, not a warning") {
    RunConfig cfg = RunConfig::defaults();
    CHECK_THROWS_AS(cfg.set("mask_ration", "0.5", Provenance::Flag), Error);
    CHECK_THROWS_AS(cfg.load_text("no_such_key = 1", "test"), Error);
    CHECK_THROWS_AS(cfg.get_int("nonexistent"), Error);
}

TEST_CASE("value validation by type") {
    RunConfig cfg = RunConfig::defaults();
    CHECK_THROWS_AS(cfg.set("epochs", "ten", Provenance::Flag), Error);
    CHECK_THROWS_AS(cfg.set("mask_ratio", "0.5x", Provenance::Flag), Error);
    CHECK_THROWS_AS(cfg.set("drop_last", "maybe", Provenance::Flag), Error);
    cfg.set("drop_last", "0", Provenance::Flag);
    CHECK_FALSE(cfg.get_bool("drop_last"));
}

TEST_CASE("precedence: flag over file over default") {
    RunConfig cfg = RunConfig::defaults();
    cfg.load_text("beta = 2.0\nepochs = 7  # comment", "test");
    CHECK(cfg.get_real("beta") == doctest::Approx(2.0));
    CHECK(cfg.provenance("beta") == Provenance::File);
    cfg.set("beta", "1.0", Provenance::Flag);
    CHECK(cfg.get_real("beta") == doctest::Approx(1.0));
    CHECK(cfg.provenance("beta") == Provenance::Flag);
    CHECK(cfg.get_int("epochs") == 7);
}

TEST_CASE("resolved text round-trips every key") {
    RunConfig cfg = RunConfig::defaults();
    cfg.set("mask_ratio", "0.25", Provenance::Flag);
    cfg.set("out_dir", "somewhere", Provenance::File);
    std::string dump = cfg.resolved_text();
    RunConfig reloaded = RunConfig::defaults();
    reloaded.load_text(dump, "resolved");
    for (const auto& key : cfg.keys())
        CHECK(reloaded.entry(key).value == cfg.entry(key).value);
}

TEST_CASE("flag and key spellings convert both ways") {
    CHECK(flag_to_key("--mask-ratio") == "mask_ratio");
    CHECK(key_to_flag("mask_ratio") == "--mask-ratio");
    CHECK(flag_to_key("--beta") == "beta");
}

TEST_CASE("parse_args: no args gives usage and exit code 2") {
    ParsedArgs parsed = parse_args({});
    CHECK(parsed.exit_code == 2);
    CHECK(parsed.usage_text.find("usage:") != std::string::npos);
}

TEST_CASE("parse_args: help exits 0") {
    CHECK(parse_args({"--help"}).exit_code == 0);
}

TEST_CASE("parse_args: unknown command exits 2") {
    ParsedArgs parsed = parse_args({"frobnicate"});
    CHECK(parsed.exit_code == 2);
    CHECK(parsed.usage_text.find("unknown command") != std::string::npos);
}

TEST_CASE("parse_args: flag sets key with flag provenance") {
    ParsedArgs parsed = parse_args({"train", "--mask-ratio", "0.75"});
    CHECK(parsed.exit_code < 0);
    CHECK(parsed.command == "train");
    CHECK(parsed.config.get_real("mask_ratio") == doctest::Approx(0.75));
    CHECK(parsed.config.provenance("mask_ratio") == Provenance::Flag);
}

TEST_CASE("parse_args: config file loaded before flag overrides") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "malm_config_test";
    fs::create_directories(dir);
    fs::path file = dir / "run.conf";
    std::ofstream(file) << "beta = 2.0\nmask_ratio = 0.5\n";

    ParsedArgs parsed = parse_args({"train", "--config", file.string(), "--beta", "1.0"});
    CHECK(parsed.exit_code < 0);
    CHECK(parsed.config.get_real("beta") == doctest::Approx(1.0));
    CHECK(parsed.config.provenance("beta") == Provenance::Flag);
    CHECK(parsed.config.get_real("mask_ratio") == doctest::Approx(0.5));
    CHECK(parsed.config.provenance("mask_ratio") == Provenance::File);
}

TEST_CASE("parse_args: bad flags exit 2") {
    CHECK(parse_args({"train", "--mask-ratio"}).exit_code == 2);     // missing value
    CHECK(parse_args({"train", "mask-ratio", "1"}).exit_code == 2);  // not a flag
    CHECK(parse_args({"train", "--no-such-key", "1"}).exit_code == 2);
}

}  // TEST_SUITE
