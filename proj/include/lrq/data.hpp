#pragma once

#include <filesystem>
#include <fstream>

#include "lrq/tensor.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// in-memory image dataset, CHW float pixels in [-1, 1]

struct Dataset {
    int64_t count = 0;
    int64_t channels = 3;
    int64_t height = 32;
    int64_t width = 32;
    std::vector<float> pixels;  // count * channels * height * width
    std::vector<int> labels;
    int num_classes = 0;

    int64_t sample_size() const { return channels * height * width; }

    Tensor batch(int64_t start, int64_t n) const {
        if (start < 0 || n < 1 || start + n > count)
            throw DataError("batch range [" + std::to_string(start) + ", " +
                            std::to_string(start + n) + ") outside dataset of " +
                            std::to_string(count));
        std::vector<float> buf(pixels.begin() + start * sample_size(),
                               pixels.begin() + (start + n) * sample_size());
        return Tensor::from_data({n, channels, height, width}, std::move(buf));
    }

    std::vector<int> batch_labels(int64_t start, int64_t n) const {
        return {labels.begin() + start, labels.begin() + start + n};
    }

    /// Deterministic shuffle of sample order.
    void shuffle(RandomEngine& rng) {
        for (int64_t i = count - 1; i > 0; --i) {
            const int64_t j = rng.uniform_int(0, i);
            if (i == j) continue;
            std::swap_ranges(pixels.begin() + i * sample_size(),
                             pixels.begin() + (i + 1) * sample_size(),
                             pixels.begin() + j * sample_size());
            std::swap(labels[i], labels[j]);
        }
    }
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: records of [1 label byte][3072 CHW pixel bytes].
// Pixels normalize as (b/255 - 0.5) / 0.5, mapping 0 -> -1 and 255 -> +1.

inline constexpr int64_t kCifarRecordBytes = 3073;

inline Dataset load_cifar10_bin(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file: " + path);
    in.seekg(0, std::ios::end);
    const int64_t size = static_cast<int64_t>(in.tellg());
    in.seekg(0);
    if (size == 0) throw DataError("dataset file is empty: " + path);
    if (size % kCifarRecordBytes != 0)
        throw DataError("dataset file truncated: " + path + " ends mid-record at byte offset " +
                        std::to_string(size) + " (record size " +
                        std::to_string(kCifarRecordBytes) + ")");

    Dataset ds;
    ds.count = size / kCifarRecordBytes;
    ds.num_classes = 10;
    ds.pixels.resize(ds.count * ds.sample_size());
    ds.labels.resize(ds.count);

    std::vector<unsigned char> record(kCifarRecordBytes);
    for (int64_t i = 0; i < ds.count; ++i) {
        in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
        if (!in)
            throw DataError("dataset file truncated: " + path + " short read at byte offset " +
                            std::to_string(i * kCifarRecordBytes));
        const int label = record[0];
        if (label > 9)
            throw DataError("invalid label " + std::to_string(label) + " at record " +
                            std::to_string(i) + " of " + path);
        ds.labels[i] = label;
        float* dst = ds.pixels.data() + i * ds.sample_size();
        for (int64_t j = 0; j < 3072; ++j)
            dst[j] = (static_cast<float>(record[1 + j]) / 255.0f - 0.5f) / 0.5f;
    }
    return ds;
}

/// Load and concatenate several CIFAR-10 batch files.
inline Dataset load_cifar10_bins(const std::vector<std::string>& paths) {
    if (paths.empty()) throw DataError("no dataset files given");
    Dataset all = load_cifar10_bin(paths[0]);
    for (size_t i = 1; i < paths.size(); ++i) {
        Dataset next = load_cifar10_bin(paths[i]);
        all.pixels.insert(all.pixels.end(), next.pixels.begin(), next.pixels.end());
        all.labels.insert(all.labels.end(), next.labels.begin(), next.labels.end());
        all.count += next.count;
    }
    return all;
}

// ---------------------------------------------------------------------------
// toy blob task: each class is a colored Gaussian bump at a random position
// on a noisy background. Linearly separable through average color, so a tiny
// convnet reaches high accuracy in a few epochs.

struct ToyBlobsSpec {
    int num_classes = 3;
    int64_t per_class = 256;
    int64_t image_size = 32;
    float noise_std = 0.15f;
    float blob_sigma = 7.0f;
};

inline Dataset make_toy_blobs(const ToyBlobsSpec& spec, uint64_t seed) {
    if (spec.num_classes < 2 || spec.num_classes > 12)
        throw ConfigError("toy task supports 2..12 classes");
    if (spec.per_class < 1) throw ConfigError("toy task needs >= 1 sample per class");

    // distinct color triples per class, away from the background gray
    static const float palette[12][3] = {
        {0.9f, -0.7f, -0.7f}, {-0.7f, 0.9f, -0.7f}, {-0.7f, -0.7f, 0.9f},
        {0.9f, 0.9f, -0.7f},  {0.9f, -0.7f, 0.9f},  {-0.7f, 0.9f, 0.9f},
        {0.9f, 0.3f, -0.3f},  {-0.3f, 0.9f, 0.3f},  {0.3f, -0.3f, 0.9f},
        {-0.9f, -0.9f, 0.5f}, {0.5f, -0.9f, -0.9f}, {-0.9f, 0.5f, -0.9f},
    };

    RandomEngine rng(seed);
    Dataset ds;
    ds.count = static_cast<int64_t>(spec.num_classes) * spec.per_class;
    ds.channels = 3;
    ds.height = spec.image_size;
    ds.width = spec.image_size;
    ds.num_classes = spec.num_classes;
    ds.pixels.resize(ds.count * ds.sample_size());
    ds.labels.resize(ds.count);

    const int64_t hw = spec.image_size * spec.image_size;
    int64_t idx = 0;
    for (int cls = 0; cls < spec.num_classes; ++cls) {
        for (int64_t s = 0; s < spec.per_class; ++s, ++idx) {
            ds.labels[idx] = cls;
            const float cx = static_cast<float>(
                rng.uniform(spec.image_size * 0.25, spec.image_size * 0.75));
            const float cy = static_cast<float>(
                rng.uniform(spec.image_size * 0.25, spec.image_size * 0.75));
            float* img = ds.pixels.data() + idx * ds.sample_size();
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t y = 0; y < spec.image_size; ++y)
                    for (int64_t x = 0; x < spec.image_size; ++x) {
                        const float dx = static_cast<float>(x) - cx;
                        const float dy = static_cast<float>(y) - cy;
                        const float bump = std::exp(-(dx * dx + dy * dy) /
                                                    (2.0f * spec.blob_sigma * spec.blob_sigma));
                        const float jitter =
                            static_cast<float>(rng.normal(0.0, spec.noise_std));
                        img[ch * hw + y * spec.image_size + x] = std::clamp(
                            palette[cls][ch] * bump + jitter, -1.0f, 1.0f);
                    }
        }
    }
    ds.shuffle(rng);
    return ds;
}

// ---------------------------------------------------------------------------
// PPM preview grid (P6, 8-bit) for human inspection of [-1,1] CHW images

inline void write_ppm_grid(const std::string& path, const std::vector<float>& pixels,
                           int64_t count, int64_t channels, int64_t height, int64_t width,
                           int64_t max_tiles = 64) {
    if (count < 1) throw DataError("preview grid needs at least one image");
    const int64_t tiles = std::min(count, max_tiles);
    const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(tiles))));
    const int64_t rows = (tiles + cols - 1) / cols;
    const int64_t pad = 2;
    const int64_t gw = cols * (width + pad) + pad;
    const int64_t gh = rows * (height + pad) + pad;

    std::vector<unsigned char> canvas(gw * gh * 3, 32);
    auto to_byte = [](float v) {
        return static_cast<unsigned char>(std::clamp((v * 0.5f + 0.5f) * 255.0f, 0.0f, 255.0f));
    };
    for (int64_t t = 0; t < tiles; ++t) {
        const int64_t r = t / cols, c = t % cols;
        const int64_t oy = pad + r * (height + pad), ox = pad + c * (width + pad);
        const float* img = pixels.data() + t * channels * height * width;
        for (int64_t y = 0; y < height; ++y)
            for (int64_t x = 0; x < width; ++x) {
                unsigned char* px = canvas.data() + ((oy + y) * gw + ox + x) * 3;
                for (int64_t ch = 0; ch < 3; ++ch) {
                    const int64_t src_ch = channels == 3 ? ch : 0;
                    px[ch] = to_byte(img[src_ch * height * width + y * width + x]);
                }
            }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write preview: " + path);
    out << "P6\n" << gw << " " << gh << "\n255\n";
    out.write(reinterpret_cast<const char*>(canvas.data()),
              static_cast<std::streamsize>(canvas.size()));
    if (!out) throw DataError("short write on preview: " + path);
}

}  // namespace lrq
