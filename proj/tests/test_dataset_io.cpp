#include <gtest/gtest.h>

#include <filesystem>

#include "fgcrn/dataset_io.hpp"

using namespace fgcrn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("fgcrn_dsio_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

DatasetScenario small_scenario() {
    return parse_dataset_scenario(KeyValues::parse(
        "mode_setpoints = 394, 399\nduration_min = 300\nfault_start_min = 100\nseed = 4\n"
        "known = N, F1, F6\nunknown = F8\nwindow = 10\nstride = 5\ntask = small\n"));
}

}  // namespace

TEST(DatasetIo, CsvRoundTripIsExact) {
    const auto dir = scratch("csv");
    std::vector<Window> ws;
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
        Window w;
        w.num_vars = 2;
        w.length = 3;
        w.y = i % 2;
        w.mode = i;
        for (int j = 0; j < 6; ++j) w.x.push_back(normal01(rng) * 1e3 + 1.0 / 3.0);
        ws.push_back(w);
    }
    write_split_csv((dir / "a.csv").string(), ws, {"c0", "c1"});
    const auto back = read_split_csv((dir / "a.csv").string(), 2, 3);
    ASSERT_EQ(back.size(), ws.size());
    for (std::size_t i = 0; i < ws.size(); ++i) {
        EXPECT_EQ(back[i].x, ws[i].x);
        EXPECT_EQ(back[i].y, ws[i].y);
        EXPECT_EQ(back[i].mode, ws[i].mode);
    }
    fs::remove_all(dir);
}

TEST(DatasetIo, CsvRejectsMalformedInput) {
    const auto dir = scratch("bad");
    auto write = [&](const std::string& text) {
        std::ofstream((dir / "b.csv").string()) << text;
        return (dir / "b.csv").string();
    };
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,0,1\n0,0,1,2\n"), 2, 2), DataError);       // header
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,0,1\n"), 1, 2), DataError);                // partial
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,1,1\n0,0,0,2\n"), 1, 2), DataError);       // order
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,0,1\n1,0,1,2\n"), 1, 2), DataError);       // label switch
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,0,1,5\n0,0,1,2\n"), 1, 2), DataError);     // fields
    EXPECT_THROW(read_split_csv(write("label,mode,t,a\n0,0,0,nan\n0,0,1,2\n"), 1, 2), DataError);     // value
    EXPECT_NO_THROW(read_split_csv(write("label,mode,t,a\r\n0,0,0,1\r\n0,0,1,2\r\n"), 1, 2));
    fs::remove_all(dir);
}

TEST(DatasetIo, ScenarioParsing) {
    const auto s = small_scenario();
    EXPECT_EQ(s.known.size(), 3u);
    EXPECT_EQ(s.unknown, std::vector<cstr::Fault>{cstr::Fault::F8});
    EXPECT_EQ(s.split_seed, 4u);
    EXPECT_EQ(s.stride, 5u);
    EXPECT_THROW(parse_dataset_scenario(KeyValues::parse("fault_id = F1\n")), ConfigError);
    EXPECT_THROW(parse_dataset_scenario(KeyValues::parse("known = N, F1\nunknown = F1\n")), ConfigError);
    EXPECT_THROW(parse_dataset_scenario(KeyValues::parse("window = 0\n")), ConfigError);
    EXPECT_THROW(parse_dataset_scenario(KeyValues::parse("known = N, F42\n")), ConfigError);
}

TEST(DatasetIo, BuildWriteLoad) {
    const auto ds = build_cstr_dataset(small_scenario());
    const auto& m = ds.manifest;
    EXPECT_EQ(m.known_labels, (std::vector<int>{0, 1, 6}));
    EXPECT_EQ(m.unknown_labels, std::vector<int>{8});
    EXPECT_EQ(m.label_names, (std::vector<std::string>{"N", "F1", "F6", "F8"}));
    EXPECT_EQ(m.num_modes, 2u);
    for (const auto& w : ds.task.train) EXPECT_LT(w.y, 3);
    std::size_t unknown = 0;
    for (const auto& w : ds.task.test) unknown += w.y == 3;
    EXPECT_GT(unknown, 0u);

    const auto dir = scratch("ds");
    write_dataset(dir.string(), ds);
    const auto back = load_dataset(dir.string());
    EXPECT_EQ(to_json(back.manifest), to_json(m));
    ASSERT_EQ(back.task.test.size(), ds.task.test.size());
    for (std::size_t i = 0; i < ds.task.test.size(); ++i) {
        EXPECT_EQ(back.task.test[i].x, ds.task.test[i].x);
        EXPECT_EQ(back.task.test[i].y, ds.task.test[i].y);
    }
    // same scenario, same bytes
    const auto dir2 = scratch("ds2");
    write_dataset(dir2.string(), build_cstr_dataset(small_scenario()));
    for (const char* f : {"train.csv", "val.csv", "test.csv", "manifest.json"}) {
        std::ifstream a(dir / f), b(dir2 / f);
        std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
        EXPECT_EQ(sa, sb) << f;
    }
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST(DatasetIo, LoadRejectsUnknownLabelInTrain) {
    auto ds = build_cstr_dataset(small_scenario());
    ds.task.train.front().y = 3;
    const auto dir = scratch("badlabel");
    write_dataset(dir.string(), ds);
    EXPECT_THROW(load_dataset(dir.string()), DataError);
    EXPECT_THROW(load_dataset((dir / "nowhere").string()), DataError);
    fs::remove_all(dir);
}

TEST(DatasetIo, ManifestValidation) {
    auto j = to_json(build_cstr_dataset(small_scenario()).manifest);
    EXPECT_NO_THROW(manifest_from_json(j));
    auto bad = j;
    bad["format"] = "other";
    EXPECT_THROW(manifest_from_json(bad), DataError);
    bad = j;
    bad["label_names"] = {"N"};
    EXPECT_THROW(manifest_from_json(bad), DataError);
    bad = j;
    bad.erase("num_vars");
    EXPECT_THROW(manifest_from_json(bad), DataError);
}
