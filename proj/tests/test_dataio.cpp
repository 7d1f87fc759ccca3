#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmq/dataio.hpp"

using namespace mmq;

namespace {

std::string temp_dir(const char* tag) {
    auto p = std::filesystem::temp_directory_path() / (std::string("mmq_dataio_") + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f),
                       std::istreambuf_iterator<char>());
}

GenConfig small_cfg() {
    GenConfig cfg;
    cfg.per_class = 20;
    return cfg;
}

} // namespace

// ============================================================================
// generate_dataset
// ============================================================================

TEST(GenerateDataset, DefaultCounts) {
    Dataset ds = generate_dataset(GenConfig{}, 42);
    EXPECT_EQ(ds.samples.size(), 500u);
    std::array<int, 5> per_class{};
    for (const Sample& s : ds.samples) per_class[static_cast<std::size_t>(s.label)]++;
    for (int c : per_class) EXPECT_EQ(c, 100);
}

TEST(GenerateDataset, RealizedVectorAccuracyNearTarget) {
    Dataset ds = generate_dataset(GenConfig{}, 42);
    EXPECT_GE(ds.manifest.vector_argmax_accuracy, 0.84);
    EXPECT_LE(ds.manifest.vector_argmax_accuracy, 0.92);
}

TEST(GenerateDataset, SameSeedSameSamples) {
    GenConfig cfg = small_cfg();
    Dataset a = generate_dataset(cfg, 7);
    Dataset b = generate_dataset(cfg, 7);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].tokens, b.samples[i].tokens);
        EXPECT_EQ(a.samples[i].image.data, b.samples[i].image.data);
        EXPECT_EQ(a.samples[i].mllm_vec.data, b.samples[i].mllm_vec.data);
    }
}

TEST(GenerateDataset, ImageValuesInUnitRange) {
    Dataset ds = generate_dataset(small_cfg(), 3);
    for (const Sample& s : ds.samples)
        for (double v : s.image.data) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
}

TEST(GenerateDataset, TokenBandsMatchClasses) {
    Dataset ds = generate_dataset(small_cfg(), 4);
    for (const Sample& s : ds.samples) {
        int in_band = 0, filler = 0;
        for (std::uint16_t t : s.tokens) {
            if (t < 10) {
                ++filler;
            } else {
                EXPECT_GE(t, 10 + 10 * s.label);
                EXPECT_LE(t, 19 + 10 * s.label);
                ++in_band;
            }
        }
        EXPECT_EQ(in_band, 8);
        EXPECT_EQ(filler, 8);
    }
}

TEST(GenerateDataset, VectorsAreDistributions) {
    Dataset ds = generate_dataset(small_cfg(), 5);
    for (const Sample& s : ds.samples) {
        double sum = 0.0;
        for (double v : s.mllm_vec.data) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(GenerateDataset, TooFewPerClassThrows) {
    GenConfig cfg;
    cfg.per_class = 5;
    EXPECT_THROW(generate_dataset(cfg, 1), ConfigError);
}

// ============================================================================
// split_dataset
// ============================================================================

TEST(SplitDataset, StratifiedEightOneOne) {
    Dataset ds = generate_dataset(GenConfig{}, 42);
    split_dataset(ds, 42);
    EXPECT_EQ(ds.train_ids.size(), 400u);
    EXPECT_EQ(ds.val_ids.size(), 50u);
    EXPECT_EQ(ds.test_ids.size(), 50u);

    std::array<std::array<int, 3>, 5> counts{};
    for (int id : ds.train_ids) counts[ds.samples[id].label][0]++;
    for (int id : ds.val_ids) counts[ds.samples[id].label][1]++;
    for (int id : ds.test_ids) counts[ds.samples[id].label][2]++;
    for (const auto& c : counts) {
        EXPECT_EQ(c[0], 80);
        EXPECT_EQ(c[1], 10);
        EXPECT_EQ(c[2], 10);
    }
}

TEST(SplitDataset, SplitsAreDisjointAndCover) {
    Dataset ds = generate_dataset(small_cfg(), 8);
    split_dataset(ds, 8);
    std::vector<int> all;
    all.insert(all.end(), ds.train_ids.begin(), ds.train_ids.end());
    all.insert(all.end(), ds.val_ids.begin(), ds.val_ids.end());
    all.insert(all.end(), ds.test_ids.begin(), ds.test_ids.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], static_cast<int>(i));
}

TEST(SplitDataset, IndivisibleCountThrows) {
    GenConfig cfg;
    cfg.per_class = 15;
    Dataset ds = generate_dataset(cfg, 1);
    EXPECT_THROW(split_dataset(ds, 1), ConfigError);
}

// ============================================================================
// preprocess
// ============================================================================

TEST(Preprocess, PixelNormalization) {
    Sample s;
    s.image = Tensor({3, 1, 1}, {0.5, 1.0, 0.0});
    s.tokens.assign(16, 0);
    s.mllm_vec = Tensor({5}, {0.2, 0.2, 0.2, 0.2, 0.2});
    s.label = 0;
    BatchSample b = preprocess(s);
    EXPECT_DOUBLE_EQ(b.image.data[0], 0.0);
    EXPECT_DOUBLE_EQ(b.image.data[1], 1.0);
    EXPECT_DOUBLE_EQ(b.image.data[2], -1.0);
}

TEST(Preprocess, VectorClampAndRenormalize) {
    Sample s;
    s.image = Tensor({3, 1, 1});
    s.tokens.assign(16, 0);
    s.mllm_vec = Tensor({5}, {0.5, 0.5, 0.0, 0.0, -0.0001});
    BatchSample b = preprocess(s);
    EXPECT_DOUBLE_EQ(b.vec[0], 0.5);
    EXPECT_DOUBLE_EQ(b.vec[1], 0.5);
    EXPECT_DOUBLE_EQ(b.vec[2], 0.0);
    EXPECT_DOUBLE_EQ(b.vec[4], 0.0);
}

TEST(Preprocess, AllZeroVectorThrows) {
    Sample s;
    s.image = Tensor({3, 1, 1});
    s.tokens.assign(16, 0);
    s.mllm_vec = Tensor({5}, {0.0, 0.0, 0.0, -0.5, 0.0});
    EXPECT_THROW(preprocess(s), std::invalid_argument);
}

// ============================================================================
// sample_calibration
// ============================================================================

TEST(SampleCalibration, DistinctIdsOfRequestedCount) {
    Dataset ds = generate_dataset(GenConfig{}, 42);
    split_dataset(ds, 42);
    auto ids = sample_calibration(ds.train_ids, 128, 42);
    EXPECT_EQ(ids.size(), 128u);
    auto sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (int id : ids)
        EXPECT_TRUE(std::find(ds.train_ids.begin(), ds.train_ids.end(), id) !=
                    ds.train_ids.end());
}

TEST(SampleCalibration, WholeSplitWhenAskedForAll) {
    std::vector<int> train(40);
    for (int i = 0; i < 40; ++i) train[i] = i;
    auto ids = sample_calibration(train, 40, 9);
    auto sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, train);
}

TEST(SampleCalibration, DeterministicAndBounded) {
    std::vector<int> train(40);
    for (int i = 0; i < 40; ++i) train[i] = i;
    EXPECT_EQ(sample_calibration(train, 10, 5), sample_calibration(train, 10, 5));
    EXPECT_THROW(sample_calibration(train, 41, 5), ConfigError);
}

// ============================================================================
// make_batches
// ============================================================================

TEST(MakeBatches, FullBatches) {
    std::vector<int> ids(400);
    for (int i = 0; i < 400; ++i) ids[i] = i;
    auto batches = make_batches(ids, 8, 1, 0);
    EXPECT_EQ(batches.size(), 50u);
    for (const auto& b : batches) EXPECT_EQ(b.size(), 8u);
}

TEST(MakeBatches, PartialFinalBatchKept) {
    std::vector<int> ids(400);
    for (int i = 0; i < 400; ++i) ids[i] = i;
    auto batches = make_batches(ids, 7, 1, 0);
    EXPECT_EQ(batches.size(), 58u);
    EXPECT_EQ(batches.back().size(), 1u);
}

TEST(MakeBatches, EpochsShuffleDifferentlySameMultiset) {
    std::vector<int> ids(64);
    for (int i = 0; i < 64; ++i) ids[i] = i;
    auto b0 = make_batches(ids, 8, 3, 0);
    auto b1 = make_batches(ids, 8, 3, 1);
    std::vector<int> flat0, flat1;
    for (const auto& b : b0) flat0.insert(flat0.end(), b.begin(), b.end());
    for (const auto& b : b1) flat1.insert(flat1.end(), b.begin(), b.end());
    EXPECT_NE(flat0, flat1);
    std::sort(flat0.begin(), flat0.end());
    std::sort(flat1.begin(), flat1.end());
    EXPECT_EQ(flat0, flat1);
}

// ============================================================================
// on-disk round trip
// ============================================================================

TEST(DatasetFiles, SaveLoadRoundTripBitExact) {
    GenConfig cfg = small_cfg();
    Dataset ds = generate_dataset(cfg, 11);
    split_dataset(ds, 11);
    std::string dir = temp_dir("roundtrip");
    save_dataset(ds, dir);
    Dataset back = load_dataset(dir);

    ASSERT_EQ(back.samples.size(), ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
        EXPECT_EQ(back.samples[i].tokens, ds.samples[i].tokens);
        for (std::size_t j = 0; j < ds.samples[i].image.numel(); ++j)
            EXPECT_EQ(static_cast<float>(ds.samples[i].image.data[j]),
                      static_cast<float>(back.samples[i].image.data[j]));
        for (std::size_t j = 0; j < 5; ++j)
            EXPECT_EQ(static_cast<float>(ds.samples[i].mllm_vec.data[j]),
                      static_cast<float>(back.samples[i].mllm_vec.data[j]));
    }
    EXPECT_EQ(back.train_ids, ds.train_ids);
    EXPECT_EQ(back.val_ids, ds.val_ids);
    EXPECT_EQ(back.test_ids, ds.test_ids);

    // saving the loaded copy reproduces identical bytes
    std::string dir2 = temp_dir("roundtrip2");
    save_dataset(back, dir2);
    for (const char* f :
         {"manifest.txt", "images.bin", "tokens.bin", "vectors.bin", "labels.bin"})
        EXPECT_EQ(slurp(dir + "/" + f), slurp(dir2 + "/" + f)) << f;
}

TEST(DatasetFiles, SameSeedByteIdenticalFiles) {
    GenConfig cfg = small_cfg();
    std::string d1 = temp_dir("det1"), d2 = temp_dir("det2");
    {
        Dataset ds = generate_dataset(cfg, 21);
        split_dataset(ds, 21);
        save_dataset(ds, d1);
    }
    {
        Dataset ds = generate_dataset(cfg, 21);
        split_dataset(ds, 21);
        save_dataset(ds, d2);
    }
    for (const char* f :
         {"manifest.txt", "images.bin", "tokens.bin", "vectors.bin", "labels.bin"})
        EXPECT_EQ(slurp(d1 + "/" + f), slurp(d2 + "/" + f)) << f;
}

// Base colors stay pairwise separated; the training acceptance target is
// reachable by construction.
TEST(DatasetInvariants, ClassColorsPairwiseSeparated) {
    const auto& colors = class_colors();
    for (std::size_t a = 0; a < colors.size(); ++a)
        for (std::size_t b = a + 1; b < colors.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                double diff = colors[a][c] - colors[b][c];
                d2 += diff * diff;
            }
            EXPECT_GE(std::sqrt(d2), 0.3);
        }
}
