#include <gtest/gtest.h>

#include "tilewise/config.hpp"

using namespace tilewise;

TEST(Config, ParsesSectionsAndTypes) {
    const auto t = parse_config(R"(
# top comment
seed = 7
[data]
slide_size = 512   # trailing comment
fraction = 0.25
name = "a \"quoted\" name"
normalize = true
[xai]
layers = [2, 4,
          6, 8]
thresholds = [0.5, 0.9]
)");
    EXPECT_EQ(std::get<std::int64_t>(t.at("seed").data), 7);
    EXPECT_EQ(std::get<std::int64_t>(t.at("data.slide_size").data), 512);
    EXPECT_EQ(std::get<double>(t.at("data.fraction").data), 0.25);
    EXPECT_EQ(std::get<std::string>(t.at("data.name").data), "a \"quoted\" name");
    EXPECT_TRUE(std::get<bool>(t.at("data.normalize").data));
    EXPECT_EQ(std::get<ConfigArray>(t.at("xai.layers").data).size(), 4u);
}

TEST(Config, ErrorsCarryLineNumbers) {
    try {
        parse_config("a = 1\nb = @\n", "cfg.toml");
        FAIL();
    } catch (const config_error& e) {
        EXPECT_NE(std::string(e.what()).find("cfg.toml:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_config("a = 1\na = 2\n"), config_error);
    EXPECT_THROW(parse_config("a = \"open\n"), config_error);
    EXPECT_THROW(parse_config("a = [1, 2\n"), config_error);
    EXPECT_THROW(parse_config("[sec\n"), config_error);
    EXPECT_THROW(parse_config("a = 1 2\n"), config_error);
    EXPECT_THROW(parse_config("a = bare\n"), config_error);
}

TEST(Config, Overrides) {
    auto [k, v] = parse_override("xai.aggregator=var");
    EXPECT_EQ(k, "xai.aggregator");
    EXPECT_EQ(std::get<std::string>(v.data), "var");
    auto [k2, v2] = parse_override("xai.layers=[2,4]");
    EXPECT_EQ(std::get<ConfigArray>(v2.data).size(), 2u);
    auto [k3, v3] = parse_override("mil.lr=1e-3");
    EXPECT_EQ(std::get<double>(v3.data), 1e-3);
    EXPECT_THROW(parse_override("novalue"), config_error);
    EXPECT_THROW(parse_override("=3"), config_error);
}

TEST(Config, ReaderTypesAndUnknownKeys) {
    const auto t = parse_config("[s]\nn = 3\nx = 2\nname = \"q\"\nv = [1.5, 2]\nflag = false\nextra = 1\n");
    ConfigReader r(t);
    std::size_t n = 0;
    double x = 0;
    std::string name;
    std::vector<double> v;
    bool flag = true;
    int missing = 42;
    r.read("s.n", n);
    r.read("s.x", x);
    r.read("s.name", name);
    r.read("s.v", v);
    r.read("s.flag", flag);
    r.read("s.missing", missing);
    EXPECT_EQ(n, 3u);
    EXPECT_EQ(x, 2.0);
    EXPECT_EQ(name, "q");
    EXPECT_EQ(v, (std::vector<double>{1.5, 2.0}));
    EXPECT_FALSE(flag);
    EXPECT_EQ(missing, 42);
    EXPECT_THROW(r.reject_unknown(), config_error);
    r.read("s.extra", missing);
    EXPECT_NO_THROW(r.reject_unknown());
}

TEST(Config, ReaderRejectsWrongTypes) {
    const auto t = parse_config("a = \"x\"\nb = -1\nc = 1.5\n");
    ConfigReader r(t);
    int i = 0;
    std::size_t u = 0;
    EXPECT_THROW(r.read("a", i), config_error);
    EXPECT_THROW(r.read("b", u), config_error);
    EXPECT_THROW(r.read("c", i), config_error);
}

TEST(Config, FormatRoundTrips) {
    ConfigTable t;
    t["experiment.seed"] = to_config_value(std::uint64_t{9});
    t["experiment.out"] = to_config_value(std::string("run \"1\""));
    t["xai.thresholds"] = to_config_value(std::vector<double>{0.5, 0.95, 1.0 / 3.0});
    t["xai.flag"] = to_config_value(true);
    t["data.scale"] = to_config_value(2.0);
    const std::string text = format_config(t);
    const auto back = parse_config(text);
    EXPECT_EQ(format_config(back), text);
    EXPECT_EQ(std::get<double>(std::get<ConfigArray>(back.at("xai.thresholds").data)[2].data), 1.0 / 3.0);
    EXPECT_TRUE(std::get<double>(back.at("data.scale").data) == 2.0);
}
