#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "moedet/configfile.hpp"

using moedet::ConfigMap;

TEST_CASE("parse: pairs, whitespace, comments, blank lines") {
    const auto cfg = ConfigMap::parse(
        "# a full-line comment\n"
        "epochs = 30\n"
        "\n"
        "  learning_rate=0.01   # trailing comment\n"
        "out = runs/exp#1.ckpt\n"
        "name=  spaced value  \n"
        "flag=true\n");
    CHECK(cfg.get_int("epochs", 0) == 30);
    CHECK(cfg.get_double("learning_rate", 0.0) == doctest::Approx(0.01));
    // '#' glued to the value is part of it; only whitespace-preceded '#' comments.
    CHECK(cfg.get_string("out", "") == "runs/exp#1.ckpt");
    CHECK(cfg.get_string("name", "") == "spaced value");
    CHECK(cfg.get_bool("flag", false));
    CHECK(cfg.unused_keys().empty());
}

TEST_CASE("parse: defaults apply for missing keys") {
    const auto cfg = ConfigMap::parse("a=1\n");
    CHECK(cfg.get_int("missing", 7) == 7);
    CHECK(cfg.get_double("missing", 2.5) == 2.5);
    CHECK(cfg.get_bool("missing", true));
    CHECK(cfg.get_string("missing", "d") == "d");
    CHECK(cfg.get_u64("missing", 9ull) == 9ull);
    CHECK(cfg.has("a"));
    CHECK(!cfg.has("missing"));
}

TEST_CASE("parse: malformed lines carry the line number") {
    CHECK_THROWS_WITH_AS(ConfigMap::parse("a=1\nnot a pair\n"), doctest::Contains("line 2"), moedet::config_error);
    CHECK_THROWS_WITH_AS(ConfigMap::parse("=5\n"), doctest::Contains("empty key"), moedet::config_error);
    CHECK_THROWS_WITH_AS(ConfigMap::parse("a=1\na=2\n"), doctest::Contains("duplicate"), moedet::config_error);
}

TEST_CASE("typed getters reject non-parsing values with the key name") {
    const auto cfg = ConfigMap::parse("epochs=soon\nrate=fast\nflag=maybe\nseed=-1\n");
    CHECK_THROWS_WITH_AS(cfg.get_int("epochs", 1), doctest::Contains("epochs"), moedet::config_error);
    CHECK_THROWS_WITH_AS(cfg.get_double("rate", 1.0), doctest::Contains("rate"), moedet::config_error);
    CHECK_THROWS_WITH_AS(cfg.get_bool("flag", false), doctest::Contains("flag"), moedet::config_error);
    CHECK_THROWS_AS(cfg.get_u64("seed", 0), moedet::config_error);
    // Partial parses are rejected, not truncated.
    const auto cfg2 = ConfigMap::parse("n=12x\n");
    CHECK_THROWS_AS(cfg2.get_int("n", 1), moedet::config_error);
}

TEST_CASE("unused_keys reports exactly the never-read keys") {
    const auto cfg = ConfigMap::parse("a=1\nb=2\nc=3\n");
    (void)cfg.get_int("a", 0);
    const auto unused = cfg.unused_keys();
    REQUIRE(unused.size() == 2);
    CHECK(unused[0] == "b");
    CHECK(unused[1] == "c");
}

TEST_CASE("load: file round trip and missing-file error") {
    const std::string path = "/tmp/moedet_cfg_test.cfg";
    {
        std::ofstream f(path);
        f << "k=v\nnum=4\n";
    }
    const auto cfg = ConfigMap::load(path);
    CHECK(cfg.get_string("k", "") == "v");
    CHECK(cfg.get_int("num", 0) == 4);
    std::remove(path.c_str());
    CHECK_THROWS_AS(ConfigMap::load("/tmp/moedet_cfg_does_not_exist.cfg"), moedet::io_error);
}
