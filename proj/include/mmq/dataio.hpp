#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmq/errors.hpp"
#include "mmq/model.hpp"
#include "mmq/rng.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian");

constexpr std::size_t kNumClasses = 5;

inline const std::array<const char*, kNumClasses>& class_names() {
    static const std::array<const char*, kNumClasses> names = {
        "red_tide", "marine_debris", "animal_stranding", "ship_fire", "ship_capsize"};
    return names;
}

// Per-class mean colors; pairwise L2 distance >= 0.3 keeps the classes
// separable in expectation.
inline const std::array<std::array<double, 3>, kNumClasses>& class_colors() {
    static const std::array<std::array<double, 3>, kNumClasses> colors = {{
        {0.8, 0.1, 0.1},
        {0.1, 0.8, 0.1},
        {0.1, 0.1, 0.8},
        {0.7, 0.7, 0.1},
        {0.5, 0.5, 0.5},
    }};
    return colors;
}

struct GenConfig {
    std::size_t per_class = 100;
    std::size_t image_size = 32;
    std::size_t patch = 8; // distractor patch side
    double noise_sigma = 0.25;
    double informative_prob = 0.88; // chance the vector is drawn around the label
    double concentration = 8.0;     // Dirichlet weight on the true class
    std::size_t tokens_per_sample = 16;
    std::size_t class_band_width = 10;
    std::uint16_t pad_id = 63;
};

struct Sample {
    int id = 0;
    Tensor image; // [3 x H x W], raw values in [0,1]
    std::vector<std::uint16_t> tokens;
    Tensor mllm_vec; // [5], nonnegative, sums to 1
    int label = 0;
};

enum class Split { train = 0, val = 1, test = 2 };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

struct Manifest {
    int format_version = 1;
    std::uint64_t seed = 0;
    GenConfig gen;
    std::size_t total = 0;
    double vector_argmax_accuracy = 0.0;
    std::vector<Split> split_of; // by sample id
};

struct Dataset {
    Manifest manifest;
    std::vector<Sample> samples; // ordered by id
    std::vector<int> train_ids, val_ids, test_ids;
};

// Per-sample draw order (fixed; determinism contract):
//   1. distractor class (one of the 4 others), 2. distractor grid cell,
//   3. per-pixel noise in (channel, y, x) raster order, 4. 8 class-band +
//   8 filler token draws then a shuffle, 5. vector mixture choice + gammas.
inline Sample generate_sample(int id, int label, const GenConfig& cfg,
                              std::uint64_t seed) {
    RngStream rng(seed, stream::kSample + static_cast<std::uint64_t>(id));
    Sample s;
    s.id = id;
    s.label = label;

    const std::size_t side = cfg.image_size;
    const std::size_t grid = side / cfg.patch;
    std::size_t other = rng.uniform_int(kNumClasses - 1);
    if (static_cast<int>(other) >= label) ++other; // skip own class
    const std::size_t cell = rng.uniform_int(grid * grid);
    const std::size_t cell_y = cell / grid, cell_x = cell % grid;

    s.image = Tensor({3, side, side});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const bool in_patch = y / cfg.patch == cell_y && x / cfg.patch == cell_x;
                const double mean = in_patch ? class_colors()[other][c]
                                             : class_colors()[label][c];
                double v = mean + cfg.noise_sigma * rng.normal();
                s.image.data[(c * side + y) * side + x] = std::clamp(v, 0.0, 1.0);
            }

    const std::size_t w = cfg.class_band_width;
    for (std::size_t k = 0; k < cfg.tokens_per_sample / 2; ++k)
        s.tokens.push_back(static_cast<std::uint16_t>(
            w + static_cast<std::size_t>(label) * w + rng.uniform_int(w)));
    for (std::size_t k = 0; k < cfg.tokens_per_sample / 2; ++k)
        s.tokens.push_back(static_cast<std::uint16_t>(rng.uniform_int(w)));
    rng.shuffle(s.tokens);

    std::vector<double> conc(kNumClasses, 1.0);
    if (rng.bernoulli(cfg.informative_prob))
        conc[static_cast<std::size_t>(label)] = cfg.concentration;
    std::vector<double> v = rng.dirichlet(conc);
    s.mllm_vec = Tensor({kNumClasses}, std::move(v));
    return s;
}

inline Dataset generate_dataset(const GenConfig& cfg, std::uint64_t seed) {
    if (cfg.per_class < 10)
        throw ConfigError("generate_dataset: per_class must be >= 10");
    if (cfg.image_size % cfg.patch != 0)
        throw ConfigError("generate_dataset: image size not divisible by patch");
    Dataset ds;
    ds.manifest.seed = seed;
    ds.manifest.gen = cfg;
    ds.manifest.total = kNumClasses * cfg.per_class;

    std::size_t hits = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c)
        for (std::size_t k = 0; k < cfg.per_class; ++k) {
            const int id = static_cast<int>(c * cfg.per_class + k);
            ds.samples.push_back(generate_sample(id, static_cast<int>(c), cfg, seed));
            if (argmax_index(ds.samples.back().mllm_vec) == static_cast<int>(c)) ++hits;
        }
    ds.manifest.vector_argmax_accuracy =
        static_cast<double>(hits) / static_cast<double>(ds.manifest.total);
    return ds;
}

// Stratified 8:1:1 split, shuffled per class.
inline void split_dataset(Dataset& ds, std::uint64_t seed) {
    const std::size_t per_class = ds.manifest.gen.per_class;
    if (per_class % 10 != 0)
        throw ConfigError("split_dataset: per-class count must be divisible by 10");
    ds.train_ids.clear();
    ds.val_ids.clear();
    ds.test_ids.clear();
    ds.manifest.split_of.assign(ds.manifest.total, Split::train);
    const std::size_t n_train = per_class * 8 / 10;
    const std::size_t n_val = per_class / 10;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::vector<int> ids(per_class);
        for (std::size_t k = 0; k < per_class; ++k)
            ids[k] = static_cast<int>(c * per_class + k);
        RngStream rng(seed, stream::kSplit + c);
        rng.shuffle(ids);
        for (std::size_t k = 0; k < per_class; ++k) {
            Split sp = k < n_train              ? Split::train
                       : k < n_train + n_val    ? Split::val
                                                : Split::test;
            ds.manifest.split_of[static_cast<std::size_t>(ids[k])] = sp;
            (sp == Split::train   ? ds.train_ids
             : sp == Split::val   ? ds.val_ids
                                  : ds.test_ids)
                .push_back(ids[k]);
        }
    }
    std::sort(ds.train_ids.begin(), ds.train_ids.end());
    std::sort(ds.val_ids.begin(), ds.val_ids.end());
    std::sort(ds.test_ids.begin(), ds.test_ids.end());
}

// Model-ready triple: image channels to (x - 0.5) / 0.5, vector clamped to
// >= 0 and renormalized to sum 1, tokens already fixed-length.
inline BatchSample preprocess(const Sample& s) {
    BatchSample b;
    b.image = s.image;
    for (double& v : b.image.data) v = (v - 0.5) / 0.5;
    b.tokens = s.tokens;
    b.vec = s.mllm_vec;
    double sum = 0.0;
    for (double& v : b.vec.data) {
        v = v < 0.0 ? 0.0 : v;
        sum += v;
    }
    if (sum <= 0.0)
        throw std::invalid_argument("preprocess: degenerate all-zero vector");
    for (double& v : b.vec.data) v /= sum;
    b.label = s.label;
    return b;
}

// Uniform sample without replacement from the train split.
inline std::vector<int> sample_calibration(const std::vector<int>& train_ids,
                                           std::size_t n, std::uint64_t seed) {
    if (n > train_ids.size())
        throw ConfigError("sample_calibration: requested " + std::to_string(n) +
                          " of " + std::to_string(train_ids.size()) + " train samples");
    std::vector<int> ids = train_ids;
    RngStream rng(seed, stream::kCalibration);
    rng.shuffle(ids);
    ids.resize(n);
    return ids;
}

// Shuffled batches for one epoch; the final partial batch is kept.
inline std::vector<std::vector<int>> make_batches(const std::vector<int>& ids,
                                                  std::size_t batch_size,
                                                  std::uint64_t epoch_seed,
                                                  std::size_t epoch_index) {
    if (batch_size == 0)
        throw ConfigError("make_batches: batch_size must be >= 1");
    std::vector<int> order = ids;
    RngStream rng(epoch_seed, stream::kEpoch + epoch_index);
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(i + batch_size, order.size());
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.txt plus one contiguous array per modality,
// ordered by sample id. Tensors are fp32 little-endian, tokens u16, labels u8.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f32(std::ofstream& f, const std::vector<double>& values) {
    for (double v : values) {
        float x = static_cast<float>(v);
        f.write(reinterpret_cast<const char*>(&x), sizeof(x));
    }
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("save_dataset: cannot create " + dir + ": " + ec.message());

    auto open = [&](const char* name) {
        std::ofstream f(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError(std::string("save_dataset: cannot write ") + name +
                              " in " + dir);
        return f;
    };

    {
        std::ofstream f = open("images.bin");
        for (const Sample& s : ds.samples) detail::write_f32(f, s.image.data);
    }
    {
        std::ofstream f = open("tokens.bin");
        for (const Sample& s : ds.samples)
            f.write(reinterpret_cast<const char*>(s.tokens.data()),
                    static_cast<std::streamsize>(s.tokens.size() * sizeof(std::uint16_t)));
    }
    {
        std::ofstream f = open("vectors.bin");
        for (const Sample& s : ds.samples) detail::write_f32(f, s.mllm_vec.data);
    }
    {
        std::ofstream f = open("labels.bin");
        for (const Sample& s : ds.samples) {
            std::uint8_t l = static_cast<std::uint8_t>(s.label);
            f.write(reinterpret_cast<const char*>(&l), 1);
        }
    }

    const Manifest& man = ds.manifest;
    const GenConfig& g = man.gen;
    std::ofstream f = open("manifest.txt");
    f << "format_version=" << man.format_version << "\n";
    f << "seed=" << man.seed << "\n";
    f << "num_classes=" << kNumClasses << "\n";
    f << "per_class=" << g.per_class << "\n";
    f << "total=" << man.total << "\n";
    f << "image_size=" << g.image_size << "\n";
    f << "distractor_patch=" << g.patch << "\n";
    f << "noise_sigma=" << detail::fmt_double(g.noise_sigma) << "\n";
    f << "informative_prob=" << detail::fmt_double(g.informative_prob) << "\n";
    f << "concentration=" << detail::fmt_double(g.concentration) << "\n";
    f << "tokens_per_sample=" << g.tokens_per_sample << "\n";
    f << "class_band_width=" << g.class_band_width << "\n";
    f << "pad_id=" << g.pad_id << "\n";
    f << "vector_argmax_accuracy=" << detail::fmt_double(man.vector_argmax_accuracy)
      << "\n";
    f << "images_bytes_per_sample=" << 3 * g.image_size * g.image_size * 4 << "\n";
    f << "tokens_bytes_per_sample=" << g.tokens_per_sample * 2 << "\n";
    f << "vectors_bytes_per_sample=" << kNumClasses * 4 << "\n";
    f << "labels_bytes_per_sample=" << 1 << "\n";
    for (std::size_t id = 0; id < man.split_of.size(); ++id)
        f << "split_" << id << "=" << to_string(man.split_of[id]) << "\n";
}

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("malformed line in " + path + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    auto kv = read_kv_file((fs::path(dir) / "manifest.txt").string());
    auto need = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end())
            throw CorruptionError("manifest missing key: " + key);
        return it->second;
    };

    Dataset ds;
    Manifest& man = ds.manifest;
    man.format_version = std::stoi(need("format_version"));
    if (man.format_version != 1)
        throw CorruptionError("unsupported dataset format_version " +
                              need("format_version"));
    man.seed = std::stoull(need("seed"));
    man.gen.per_class = std::stoul(need("per_class"));
    man.total = std::stoul(need("total"));
    man.gen.image_size = std::stoul(need("image_size"));
    man.gen.patch = std::stoul(need("distractor_patch"));
    man.gen.noise_sigma = std::stod(need("noise_sigma"));
    man.gen.informative_prob = std::stod(need("informative_prob"));
    man.gen.concentration = std::stod(need("concentration"));
    man.gen.tokens_per_sample = std::stoul(need("tokens_per_sample"));
    man.gen.class_band_width = std::stoul(need("class_band_width"));
    man.gen.pad_id = static_cast<std::uint16_t>(std::stoul(need("pad_id")));
    man.vector_argmax_accuracy = std::stod(need("vector_argmax_accuracy"));

    man.split_of.resize(man.total);
    for (std::size_t id = 0; id < man.total; ++id) {
        const std::string v = need("split_" + std::to_string(id));
        Split sp = v == "train"   ? Split::train
                   : v == "val"   ? Split::val
                   : v == "test"  ? Split::test
                                  : throw CorruptionError("bad split value: " + v);
        man.split_of[id] = sp;
    }

    const std::size_t side = man.gen.image_size;
    const std::size_t img_len = 3 * side * side;
    std::ifstream fi(fs::path(dir) / "images.bin", std::ios::binary);
    std::ifstream ft(fs::path(dir) / "tokens.bin", std::ios::binary);
    std::ifstream fv(fs::path(dir) / "vectors.bin", std::ios::binary);
    std::ifstream fl(fs::path(dir) / "labels.bin", std::ios::binary);
    if (!fi || !ft || !fv || !fl)
        throw IoError("load_dataset: missing data files in " + dir);

    ds.samples.resize(man.total);
    for (std::size_t id = 0; id < man.total; ++id) {
        Sample& s = ds.samples[id];
        s.id = static_cast<int>(id);
        s.image = Tensor({3, side, side});
        for (std::size_t i = 0; i < img_len; ++i) {
            float x;
            fi.read(reinterpret_cast<char*>(&x), sizeof(x));
            s.image.data[i] = x;
        }
        s.tokens.resize(man.gen.tokens_per_sample);
        ft.read(reinterpret_cast<char*>(s.tokens.data()),
                static_cast<std::streamsize>(s.tokens.size() * sizeof(std::uint16_t)));
        s.mllm_vec = Tensor({kNumClasses});
        for (std::size_t i = 0; i < kNumClasses; ++i) {
            float x;
            fv.read(reinterpret_cast<char*>(&x), sizeof(x));
            s.mllm_vec.data[i] = x;
        }
        std::uint8_t l;
        fl.read(reinterpret_cast<char*>(&l), 1);
        s.label = l;

        auto push = [&](std::vector<int>& v) { v.push_back(s.id); };
        switch (man.split_of[id]) {
            case Split::train: push(ds.train_ids); break;
            case Split::val: push(ds.val_ids); break;
            case Split::test: push(ds.test_ids); break;
        }
    }
    if (!fi || !ft || !fv || !fl)
        throw CorruptionError("load_dataset: truncated data files in " + dir);
    return ds;
}

} // namespace mmq
