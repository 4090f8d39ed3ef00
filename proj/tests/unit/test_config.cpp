#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace conveyor;
using nlohmann::json;
using testsupport::example_config;

namespace {

json example_json() {
    std::ifstream is(example_config());
    return json::parse(is);
}

config::Scenario parse(const json& j) {
    return config::parse_scenario(j, std::filesystem::path(example_config()).parent_path());
}

// The parse must fail with a ConfigError whose message contains `needle`.
void expect_config_error(const json& j, const std::string& needle) {
    try {
        parse(j);
        ADD_FAILURE() << "no error, expected one mentioning " << needle;
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
}

}  // namespace

TEST(ExampleConfig, Loads) {
    auto sc = config::load_scenario(example_config());
    EXPECT_EQ(sc.array.coils().size(), 20u);
    EXPECT_EQ(sc.array.channel_count(), 15u);
    EXPECT_DOUBLE_EQ(sc.path.length(), 0.73);
    EXPECT_DOUBLE_EQ(sc.gradient, 1.2);
    EXPECT_FALSE(sc.aspect_ratio.has_value());
    EXPECT_EQ(sc.sections.size(), 3u);
    EXPECT_DOUBLE_EQ(sc.mot.ramp, 0.4);
    EXPECT_EQ(sc.loss.dominant.label, "He4");
    EXPECT_DOUBLE_EQ(sc.loss.measured_lifetime, 794);
    EXPECT_FALSE(sc.background.empty());
}

TEST(ExampleConfig, MotGradientIsNinetyGaussPerCm) {
    auto sc = config::load_scenario(example_config());
    auto f = assembly_field(sc.array, pipeline::mot_currents(sc), Vec3::Zero());
    EXPECT_NEAR(units::to_gauss_per_cm(f.J(2, 2)), 90.0, 1e-9);
    EXPECT_NEAR(units::to_gauss_per_cm(f.J(0, 0)), -45.0, 1e-9);
}

TEST(ExampleConfig, CurrentDerivedFromGradientWhenAbsent) {
    auto j = example_json();
    double given = j["mot"]["current_A"].get<double>();
    j["mot"].erase("current_A");
    auto sc = parse(j);
    EXPECT_NEAR(sc.mot.current, given, 1e-12 * given);
}

TEST(ExampleConfig, AspectRatioFromMotTrapIsOne) {
    auto sc = config::load_scenario(example_config());
    EXPECT_NEAR(pipeline::aspect_ratio(sc), 1.0, 1e-12);
    auto j = example_json();
    j["trap"]["aspect_ratio"] = 0.8;
    EXPECT_DOUBLE_EQ(*parse(j).aspect_ratio, 0.8);
}

TEST(MalformedConfig, NamesTheField) {
    auto base = example_json();
    {
        auto j = base;
        j.erase("coils");
        expect_config_error(j, "'coils'");
    }
    {
        auto j = base;
        j["coils"][0]["center_m"] = {0, 0};
        expect_config_error(j, "center_m");
    }
    {
        auto j = base;
        j["coils"][3]["windings"] = "many";
        expect_config_error(j, "windings");
    }
    {
        auto j = base;
        j["path"]["legs"][1]["mode"] = "diagonal";
        expect_config_error(j, "mode");
    }
    {
        auto j = base;
        j["path"]["legs"][0]["length_m"] = -1;
        expect_config_error(j, "length_m");
    }
    {
        auto j = base;
        j["schedule"][0]["channels"][0] = "H9";
        expect_config_error(j, "H9");
    }
    {
        auto j = base;
        j["transport"]["sections"][1]["vmax_m_per_s"] = 0;
        expect_config_error(j, "vmax_m_per_s");
    }
    {
        auto j = base;
        j["mot"]["channel"] = "nope";
        expect_config_error(j, "channel");
    }
    {
        auto j = base;
        j["simulation"]["backend"] = "gpu";
        expect_config_error(j, "backend");
    }
    {
        auto j = base;
        j["lossmodel"]["dominant_gas"] = "Xe";
        expect_config_error(j, "dominant_gas");
    }
    {
        auto j = base;
        j["trap"].erase("gradient_G_per_cm");
        expect_config_error(j, "gradient_G_per_cm");
    }
    {
        auto j = base;
        j["background"]["stages"][0]["lifetime_s"] = 0;
        expect_config_error(j, "lifetime_s");
    }
}

TEST(MalformedConfig, ScheduleGapIsRejected) {
    auto j = example_json();
    j["schedule"][1]["s_begin_m"] = 0.17;
    expect_config_error(j, "gap");
}

TEST(MalformedConfig, BadFiles) {
    EXPECT_THROW(config::load_scenario("/nonexistent/conveyor.json"), ConfigError);
    auto p = std::filesystem::temp_directory_path() / "conveyor_bad.json";
    std::ofstream(p) << "{ \"coils\": [ ";
    EXPECT_THROW(config::load_scenario(p), ConfigError);
    std::filesystem::remove(p);
}

TEST(DefaultSchedule, UsedWhenNoneConfigured) {
    auto j = example_json();
    j.erase("schedule");
    auto sc = parse(j);
    EXPECT_EQ(sc.schedule.active(0.01).size(), 3u);
    EXPECT_EQ(sc.schedule.active(0.6).size(), 4u);
}

TEST(SpeciesDatabase, Parses) {
    auto db = config::parse_species_db(json::parse(R"({"species": [{"label": "H2", "mass_u": 2.016, "C6_au": 12.1}]})"));
    ASSERT_EQ(db.size(), 1u);
    EXPECT_DOUBLE_EQ(db[0].mass, 2.016 * units::amu);
    EXPECT_THROW(config::parse_species_db(json::parse(R"({"species": [{"label": "H2", "mass_u": -1, "C6_au": 1}]})")),
                 ConfigError);
}
