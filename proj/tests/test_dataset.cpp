#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include "histocase/dataset.hpp"
#include "histocase/error.hpp"
#include "histocase/image.hpp"
#include "histocase/io.hpp"
#include "histocase/synthetic.hpp"
#include "support.hpp"

using namespace histocase;
using namespace histocase::dataset;
namespace fs = std::filesystem;

namespace {

template <typename F>
void expect_kind(F&& fn, ErrorKind kind) {
    try {
        fn();
        FAIL() << "no error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

Raster solid(int w, int h, int channels, std::uint8_t v) {
    Raster r{w, h, channels, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * channels, v)};
    return r;
}

// n patients, alternating labels, one image per magnification.
Manifest patients_manifest(int n) {
    std::vector<ImageRecord> recs;
    for (int p = 0; p < n; ++p)
        for (int m : {40, 100}) {
            const std::string pid = "p" + std::to_string(100 + p);
            recs.push_back({pid + "-" + std::to_string(m), pid, p % 2 ? "malignant" : "benign", m, "x.png", 0, 0});
        }
    return Manifest(recs);
}

}  // namespace

TEST(Csv, LoadsAndResolvesRelativePaths) {
    const auto dir = testkit::temp_dir("csv_ok");
    write_png(dir / "a.png", solid(5, 4, 3, 10));
    io::write_text(dir / "m.csv",
                   "image_id,patient_id,malignancy,magnification,pixel_source\n"
                   "b1,P2,malignant,100,a.png\n"
                   "a1,P1,benign,40,a.png\n");
    const auto m = load_manifest(dir / "m.csv", ManifestFormat::Csv);
    ASSERT_EQ(m.records().size(), 2u);
    EXPECT_EQ(m.records()[0].image_id, "a1");  // sorted by image_id
    EXPECT_EQ(fs::path(m.records()[0].pixel_source), dir / "a.png");
    EXPECT_EQ(m.label_set(), (std::vector<std::string>{"benign", "malignant"}));
    EXPECT_EQ(m.magnification_set(), (std::vector<int>{40, 100}));
    EXPECT_EQ(m.patients(), (std::vector<std::string>{"P1", "P2"}));
    EXPECT_FALSE(m.source_fingerprint().empty());
}

TEST(Csv, DuplicateImageId) {
    const auto dir = testkit::temp_dir("csv_dup");
    io::write_text(dir / "m.csv",
                   "image_id,patient_id,malignancy,magnification,pixel_source\n"
                   "a,P1,benign,40,a.png\n"
                   "a,P1,benign,100,b.png\n");
    expect_kind([&] { load_manifest(dir / "m.csv", ManifestFormat::Csv); }, ErrorKind::DuplicateImageId);
}

TEST(Csv, MissingColumn) {
    const auto dir = testkit::temp_dir("csv_col");
    io::write_text(dir / "m.csv", "image_id,patient_id,magnification,pixel_source\na,P1,40,a.png\n");
    expect_kind([&] { load_manifest(dir / "m.csv", ManifestFormat::Csv); }, ErrorKind::MissingColumn);
}

TEST(Csv, UnknownLabelAgainstDeclaredSet) {
    const auto dir = testkit::temp_dir("csv_label");
    io::write_text(dir / "m.csv",
                   "image_id,patient_id,malignancy,magnification,pixel_source\n"
                   "a,P1,borderline,40,a.png\n");
    expect_kind([&] { load_manifest(dir / "m.csv", ManifestFormat::Csv, {{"benign", "malignant"}, {}}); },
                ErrorKind::UnknownLabel);
    io::write_text(dir / "m.csv",
                   "image_id,patient_id,malignancy,magnification,pixel_source\n"
                   "a,P1,benign,63,a.png\n");
    expect_kind([&] { load_manifest(dir / "m.csv", ManifestFormat::Csv, {{}, {40, 100}}); }, ErrorKind::UnknownLabel);
}

TEST(Csv, MalformedMagnificationAndUnreadablePath) {
    const auto dir = testkit::temp_dir("csv_bad");
    io::write_text(dir / "m.csv",
                   "image_id,patient_id,malignancy,magnification,pixel_source\n"
                   "a,P1,benign,forty,a.png\n");
    expect_kind([&] { load_manifest(dir / "m.csv", ManifestFormat::Csv); }, ErrorKind::MalformedRecord);
    expect_kind([&] { load_manifest(dir / "missing.csv", ManifestFormat::Csv); }, ErrorKind::UnreadablePath);
}

TEST(Csv, WriteThenReadKeepsFingerprint) {
    const auto corpus = synthetic::generate_synthetic_manifest({});
    const auto dir = testkit::temp_dir("csv_roundtrip");
    const auto written = synthetic::write_pixel_store(corpus, dir / "pixels");
    write_manifest_csv(written, dir / "manifest.csv");
    const auto back = load_manifest(dir / "manifest.csv", ManifestFormat::Csv);
    EXPECT_EQ(back.source_fingerprint(), corpus.manifest.source_fingerprint());
    EXPECT_EQ(back.records().size(), corpus.manifest.records().size());
}

TEST(Breakhis, PatientIdFromFilename) {
    EXPECT_EQ(breakhis_patient_id("SOB_B_A-14-22549AB-40-001.png"), "14-22549AB");
    EXPECT_EQ(breakhis_patient_id("SOB_M_DC-14-2523-400-010.png"), "14-2523");
    expect_kind([] { breakhis_patient_id("random.png"); }, ErrorKind::MalformedRecord);
}

TEST(Breakhis, LoadsFakeTree) {
    const auto root = testkit::temp_dir("breakhis");
    const auto img = solid(7, 5, 3, 200);
    const std::vector<std::tuple<std::string, std::string, int>> files{
        {"benign/SOB/adenosis/SOB_B_A_14-22549AB/40X", "SOB_B_A-14-22549AB-40-001.png", 40},
        {"benign/SOB/adenosis/SOB_B_A_14-22549AB/100X", "SOB_B_A-14-22549AB-100-001.png", 100},
        {"malignant/SOB/ductal_carcinoma/SOB_M_DC_14-2523/40X", "SOB_M_DC-14-2523-40-001.png", 40},
        {"malignant/SOB/ductal_carcinoma/SOB_M_DC_14-2523/100X", "SOB_M_DC-14-2523-100-001.png", 100},
    };
    for (const auto& [d, f, m] : files) {
        fs::create_directories(root / d);
        write_png(root / d / f, img);
    }
    std::ofstream(root / "README.txt") << "ignored";
    const auto man = load_manifest(root, ManifestFormat::BreakhisLayout);
    ASSERT_EQ(man.records().size(), 4u);
    EXPECT_EQ(man.patients(), (std::vector<std::string>{"14-22549AB", "14-2523"}));
    EXPECT_EQ(man.patient_label("14-2523"), "malignant");
    EXPECT_EQ(man.find("SOB_B_A-14-22549AB-100-001").magnification, 100);
    EXPECT_EQ(man.magnification_set(), (std::vector<int>{40, 100}));
}

TEST(Breakhis, RealTreeWhenAvailable) {
    const char* root = std::getenv("HISTOCASE_BREAKHIS_ROOT");
    if (!root) GTEST_SKIP() << "HISTOCASE_BREAKHIS_ROOT not set";
    const auto man = load_manifest(root, ManifestFormat::BreakhisLayout);
    EXPECT_EQ(man.patients().size(), 82u);
    EXPECT_EQ(man.magnification_set(), (std::vector<int>{40, 100, 200, 400}));
}

TEST(Folds, EightyTwoPatientsSplit54To28) {
    const auto m = patients_manifest(82);
    const auto folds = split_folds(m, 5, 0.659, 1);
    ASSERT_EQ(folds.size(), 5u);
    for (const auto& f : folds) {
        EXPECT_EQ(f.train_patients.size(), 54u);
        EXPECT_EQ(f.test_patients.size(), 28u);
        EXPECT_NO_THROW(validate_fold(f, m));
    }
}

TEST(Folds, SmallestPartition) {
    const auto folds = split_folds(patients_manifest(2), 1, 0.5, 3);
    EXPECT_EQ(folds[0].train_patients.size(), 1u);
    EXPECT_EQ(folds[0].test_patients.size(), 1u);
    expect_kind([] { split_folds(patients_manifest(2), 1, 0.9, 3); }, ErrorKind::TooFewPatients);
    expect_kind([] { split_folds(patients_manifest(1), 1, 0.5, 3); }, ErrorKind::TooFewPatients);
}

TEST(Folds, DisjointCoveringAndDeterministic) {
    for (int n = 2; n <= 40; ++n)
        for (std::uint64_t seed : {1u, 2u, 3u})
            for (bool strat : {true, false}) {
                const auto m = patients_manifest(n);
                const double frac = 0.3 + 0.05 * (n % 8);
                std::vector<FoldSplit> folds;
                try {
                    folds = split_folds(m, 3, frac, seed, strat);
                } catch (const Error& e) {
                    EXPECT_EQ(e.kind(), ErrorKind::TooFewPatients);
                    continue;
                }
                const auto again = split_folds(m, 3, frac, seed, strat);
                for (std::size_t i = 0; i < folds.size(); ++i) {
                    const auto& f = folds[i];
                    std::set<std::string> train(f.train_patients.begin(), f.train_patients.end());
                    for (const auto& p : f.test_patients) EXPECT_FALSE(train.contains(p));
                    EXPECT_EQ(f.train_patients.size() + f.test_patients.size(), static_cast<std::size_t>(n));
                    EXPECT_EQ(f.train_patients, again[i].train_patients);
                    EXPECT_EQ(f.test_patients, again[i].test_patients);
                }
            }
}

TEST(Folds, FileRoundTripAndValidation) {
    const auto m = patients_manifest(6);
    const auto folds = split_folds(m, 2, 0.5, 4);
    const auto dir = testkit::temp_dir("folds");
    write_fold_file(folds, dir / "folds.json");
    const auto back = load_fold_file(dir / "folds.json", m);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].train_patients, folds[1].train_patients);
    io::write_text(dir / "bad.json", R"({"1": {"train": ["p100", "p101"], "test": ["p101", "p102", "p103", "p104", "p105"]}})");
    expect_kind([&] { load_fold_file(dir / "bad.json", m); }, ErrorKind::InvalidFoldFile);
    io::write_text(dir / "short.json", R"({"1": {"train": ["p100"], "test": ["p101"]}})");
    expect_kind([&] { load_fold_file(dir / "short.json", m); }, ErrorKind::InvalidFoldFile);
}

TEST(Preprocess, BreakhisSizeResizesTo100) {
    Raster r = solid(700, 460, 3, 0);
    for (int y = 0; y < 460; ++y)
        for (int x = 0; x < 700; ++x) r.at(y, x, 0) = static_cast<std::uint8_t>(x * 255 / 699);
    const auto t = preprocess_raster(r, {100, 100});
    EXPECT_EQ(t.height, 100);
    EXPECT_EQ(t.width, 100);
    EXPECT_EQ(t.channels, 3);
    for (double v : t.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_LT(t.at(50, 0, 0), t.at(50, 99, 0));
}

TEST(Preprocess, ConstantScalesToOne) {
    const auto t = preprocess_raster(solid(100, 100, 3, 255), {100, 100});
    for (double v : t.values) EXPECT_EQ(v, 1.0);
}

TEST(Preprocess, GrayscaleIsChannelMismatch) {
    expect_kind([] { preprocess_raster(solid(50, 50, 1, 9), {100, 100}); }, ErrorKind::ChannelMismatch);
    const auto dir = testkit::temp_dir("gray");
    write_png(dir / "g.png", solid(50, 50, 1, 9));
    ImageRecord rec{"g", "p", "benign", 40, (dir / "g.png").string(), 0, 0};
    expect_kind([&] { preprocess_image(rec, {100, 100}); }, ErrorKind::ChannelMismatch);
}

TEST(Preprocess, IdempotentOnTargetSize) {
    Rng rng(3);
    Raster r = solid(16, 16, 3, 0);
    for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
    const auto t = preprocess_raster(r, {16, 16});
    for (std::size_t i = 0; i < r.pixels.size(); ++i) EXPECT_DOUBLE_EQ(t.values[i], r.pixels[i] / 255.0);
}

TEST(Preprocess, DecodeFailure) {
    const auto dir = testkit::temp_dir("decode");
    io::write_text(dir / "x.png", "not an image");
    expect_kind([&] { decode_raster(dir / "x.png"); }, ErrorKind::DecodeFailure);
}

TEST(Synthetic, CountsAndLabels) {
    synthetic::SyntheticSpec spec;  // 8 patients, 4 per cell, 2 labels, 4 magnifications
    const auto c = synthetic::generate_synthetic_manifest(spec);
    EXPECT_EQ(c.manifest.records().size(), 8u * 4u * 4u);
    EXPECT_EQ(c.pixels.size(), 128u);
    EXPECT_EQ(c.manifest.patients().size(), 8u);
    std::map<std::string, std::set<std::string>> labels;
    std::map<std::pair<std::string, int>, int> cells;
    for (const auto& r : c.manifest.records()) {
        labels[r.patient_id].insert(r.malignancy);
        ++cells[{r.patient_id, r.magnification}];
    }
    for (const auto& [p, l] : labels) EXPECT_EQ(l.size(), 1u);
    for (const auto& [k, n] : cells) EXPECT_EQ(n, 4);
}

TEST(Synthetic, SeedRepeatedIsByteIdentical) {
    synthetic::SyntheticSpec spec;
    spec.seed = 99;
    const auto a = synthetic::generate_synthetic_manifest(spec);
    const auto b = synthetic::generate_synthetic_manifest(spec);
    for (const auto& [id, r] : a.pixels) EXPECT_EQ(r.pixels, b.pixels.at(id).pixels) << id;
    const auto d1 = testkit::temp_dir("synth_a");
    const auto d2 = testkit::temp_dir("synth_b");
    synthetic::write_pixel_store(a, d1);
    synthetic::write_pixel_store(b, d2);
    for (const auto& [id, r] : a.pixels)
        EXPECT_EQ(io::read_text(d1 / (id + ".png")), io::read_text(d2 / (id + ".png")));
    spec.seed = 100;
    const auto c = synthetic::generate_synthetic_manifest(spec);
    EXPECT_NE(a.pixels.begin()->second.pixels, c.pixels.begin()->second.pixels);
}

TEST(Synthetic, ZeroSeparationIsClassIndependent) {
    for (auto kind : {synthetic::SignalKind::Stripes, synthetic::SignalKind::Dots})
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto benign = synthetic::render_image(kind, 0, 2, true, 0.0, 0.05, 24, seed);
            const auto malignant = synthetic::render_image(kind, 1, 2, true, 0.0, 0.05, 24, seed);
            EXPECT_EQ(benign.pixels, malignant.pixels);
        }
}

TEST(Synthetic, BackgroundFieldsIgnoreTheLabel) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto a = synthetic::render_image(synthetic::SignalKind::Dots, 0, 2, false, 1.0, 0.05, 24, seed);
        const auto b = synthetic::render_image(synthetic::SignalKind::Dots, 1, 2, false, 1.0, 0.05, 24, seed);
        EXPECT_EQ(a.pixels, b.pixels);
    }
}

TEST(Synthetic, RejectsBadParameters) {
    synthetic::SyntheticSpec spec;
    spec.n_patients = 1;
    expect_kind([&] { synthetic::generate_synthetic_manifest(spec); }, ErrorKind::InvalidArgument);
    spec.n_patients = 4;
    spec.images_per_cell = 0;
    expect_kind([&] { synthetic::generate_synthetic_manifest(spec); }, ErrorKind::InvalidArgument);
}

TEST(Subsets, PatientsAndMagnifications) {
    const auto c = synthetic::generate_synthetic_manifest({});
    const auto sub = subset_patients(c.manifest, {"P000", "P003"});
    EXPECT_EQ(sub.patients(), (std::vector<std::string>{"P000", "P003"}));
    EXPECT_EQ(sub.records().size(), 32u);
    const auto one = restrict_magnifications(c.manifest, {200});
    EXPECT_EQ(one.magnification_set(), (std::vector<int>{200}));
    EXPECT_EQ(one.records().size(), 32u);
}
