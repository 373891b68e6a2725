#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <lrq/lrq.hpp>

using namespace lrq;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::path(::testing::TempDir()) / name).string();
}

std::string write_cifar_file(const std::string& name, const std::vector<int>& labels,
                             const std::vector<unsigned char>& fill_values,
                             int64_t extra_bytes = 0) {
    const std::string path = tmp_path(name);
    std::ofstream out(path, std::ios::binary);
    for (size_t i = 0; i < labels.size(); ++i) {
        out.put(static_cast<char>(labels[i]));
        std::vector<char> px(3072, static_cast<char>(fill_values[i]));
        out.write(px.data(), px.size());
    }
    std::vector<char> extra(extra_bytes, 0);
    out.write(extra.data(), extra.size());
    return path;
}

}  // namespace

TEST(ToyBlobs, CountBalanceAndRange) {
    ToyBlobsSpec spec;
    spec.num_classes = 4;
    spec.per_class = 16;
    spec.image_size = 16;
    auto ds = make_toy_blobs(spec, 5);
    EXPECT_EQ(ds.count, 64);
    EXPECT_EQ(ds.num_classes, 4);
    EXPECT_EQ(ds.pixels.size(), static_cast<size_t>(64) * 3 * 16 * 16);
    std::map<int, int> counts;
    for (int y : ds.labels) counts[y]++;
    for (int c = 0; c < 4; ++c) EXPECT_EQ(counts[c], 16) << "class " << c;
    for (float v : ds.pixels) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(ToyBlobs, DeterministicPerSeed) {
    ToyBlobsSpec spec;
    spec.num_classes = 2;
    spec.per_class = 8;
    spec.image_size = 12;
    auto a = make_toy_blobs(spec, 5);
    auto b = make_toy_blobs(spec, 5);
    auto c = make_toy_blobs(spec, 6);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.pixels, c.pixels);
}

TEST(ToyBlobs, SpecValidation) {
    ToyBlobsSpec bad;
    bad.num_classes = 1;
    EXPECT_THROW(make_toy_blobs(bad, 1), ConfigError);
    bad.num_classes = 13;
    EXPECT_THROW(make_toy_blobs(bad, 1), ConfigError);
    bad.num_classes = 3;
    bad.per_class = 0;
    EXPECT_THROW(make_toy_blobs(bad, 1), ConfigError);
}

TEST(ToyBlobs, NearestCentroidSeparability) {
    // the task must be easy: class centroids in pixel space already classify
    // held-out samples well
    ToyBlobsSpec spec;
    spec.num_classes = 3;
    spec.per_class = 48;
    spec.image_size = 16;
    auto train = make_toy_blobs(spec, 21);
    spec.per_class = 24;
    auto eval = make_toy_blobs(spec, 22);

    const int64_t d = train.sample_size();
    std::vector<std::vector<double>> centroid(3, std::vector<double>(d, 0.0));
    std::vector<int> n(3, 0);
    for (int64_t i = 0; i < train.count; ++i) {
        const int y = train.labels[i];
        ++n[y];
        for (int64_t j = 0; j < d; ++j) centroid[y][j] += train.pixels[i * d + j];
    }
    for (int c = 0; c < 3; ++c)
        for (auto& v : centroid[c]) v /= n[c];

    int correct = 0;
    for (int64_t i = 0; i < eval.count; ++i) {
        int best = -1;
        double best_dist = 0;
        for (int c = 0; c < 3; ++c) {
            double dist = 0;
            for (int64_t j = 0; j < d; ++j) {
                const double diff = eval.pixels[i * d + j] - centroid[c][j];
                dist += diff * diff;
            }
            if (best < 0 || dist < best_dist) {
                best = c;
                best_dist = dist;
            }
        }
        correct += best == eval.labels[i];
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(eval.count), 0.9);
}

TEST(Dataset, BatchSlicingAndBounds) {
    ToyBlobsSpec spec;
    spec.num_classes = 2;
    spec.per_class = 4;
    spec.image_size = 8;
    auto ds = make_toy_blobs(spec, 3);

    auto b = ds.batch(2, 3);
    EXPECT_EQ(b.shape(), (Shape{3, 3, 8, 8}));
    for (int64_t j = 0; j < ds.sample_size(); ++j)
        EXPECT_EQ(b.values()[j], ds.pixels[2 * ds.sample_size() + j]);
    auto labels = ds.batch_labels(2, 3);
    EXPECT_EQ(labels, (std::vector<int>{ds.labels[2], ds.labels[3], ds.labels[4]}));

    EXPECT_THROW(ds.batch(-1, 2), DataError);
    EXPECT_THROW(ds.batch(0, 0), DataError);
    EXPECT_THROW(ds.batch(7, 2), DataError);
    EXPECT_NO_THROW(ds.batch(7, 1));
}

TEST(Dataset, ShufflePermutesConsistently) {
    ToyBlobsSpec spec;
    spec.num_classes = 3;
    spec.per_class = 8;
    spec.image_size = 8;
    auto ds = make_toy_blobs(spec, 3);
    auto orig_labels = ds.labels;
    double orig_sum = 0;
    for (float v : ds.pixels) orig_sum += v;

    RandomEngine rng(99);
    ds.shuffle(rng);
    auto sorted_orig = orig_labels, sorted_now = ds.labels;
    std::sort(sorted_orig.begin(), sorted_orig.end());
    std::sort(sorted_now.begin(), sorted_now.end());
    EXPECT_EQ(sorted_orig, sorted_now);
    double now_sum = 0;
    for (float v : ds.pixels) now_sum += v;
    EXPECT_NEAR(orig_sum, now_sum, 1e-3);

    // label/pixel pairing survives: find a moved sample and match content
    ToyBlobsSpec one;
    one.num_classes = 2;
    one.per_class = 2;
    one.image_size = 4;
    auto small = make_toy_blobs(one, 7);
    auto before_px = small.pixels;
    auto before_lb = small.labels;
    RandomEngine rng2(5);
    small.shuffle(rng2);
    for (int64_t i = 0; i < small.count; ++i) {
        // locate sample i's pixels in the original array
        bool found = false;
        for (int64_t j = 0; j < small.count && !found; ++j) {
            if (std::equal(small.pixels.begin() + i * small.sample_size(),
                           small.pixels.begin() + (i + 1) * small.sample_size(),
                           before_px.begin() + j * small.sample_size())) {
                EXPECT_EQ(small.labels[i], before_lb[j]);
                found = true;
            }
        }
        EXPECT_TRUE(found) << "sample " << i << " lost by shuffle";
    }
}

TEST(CifarLoader, ParsesRecordsAndNormalizes) {
    const auto path = write_cifar_file("cifar_ok.bin", {0, 1, 9}, {255, 0, 128});
    auto ds = load_cifar10_bin(path);
    EXPECT_EQ(ds.count, 3);
    EXPECT_EQ(ds.num_classes, 10);
    EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 9}));
    EXPECT_FLOAT_EQ(ds.pixels[0], 1.0f);                       // byte 255 -> +1
    EXPECT_FLOAT_EQ(ds.pixels[ds.sample_size()], -1.0f);       // byte 0 -> -1
    EXPECT_NEAR(ds.pixels[2 * ds.sample_size()], (128.0f / 255.0f - 0.5f) / 0.5f, 1e-6);
}

TEST(CifarLoader, TruncationReportsOffset) {
    const auto path = write_cifar_file("cifar_trunc.bin", {0, 1}, {10, 20}, 100);
    try {
        load_cifar10_bin(path);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("6246"), std::string::npos) << e.what();
    }
}

TEST(CifarLoader, BadLabelNamesRecord) {
    const auto path = write_cifar_file("cifar_badlabel.bin", {0, 10}, {1, 2});
    try {
        load_cifar10_bin(path);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("record 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("10"), std::string::npos) << msg;
    }
}

TEST(CifarLoader, MissingAndEmptyFiles) {
    EXPECT_THROW(load_cifar10_bin(tmp_path("no_such_file.bin")), DataError);
    const auto path = tmp_path("cifar_empty.bin");
    std::ofstream(path, std::ios::binary).close();
    EXPECT_THROW(load_cifar10_bin(path), DataError);
    EXPECT_THROW(load_cifar10_bins({}), DataError);
}

TEST(CifarLoader, ConcatenatesBatchFiles) {
    const auto a = write_cifar_file("cifar_a.bin", {1, 2}, {10, 20});
    const auto b = write_cifar_file("cifar_b.bin", {3}, {30});
    auto ds = load_cifar10_bins({a, b});
    EXPECT_EQ(ds.count, 3);
    EXPECT_EQ(ds.labels, (std::vector<int>{1, 2, 3}));
    EXPECT_EQ(ds.pixels.size(), static_cast<size_t>(3) * 3072);
}

TEST(PpmGrid, HeaderAndPixelMapping) {
    const auto path = tmp_path("grid.ppm");
    std::vector<float> img(3 * 4 * 4, 1.0f);  // one all-white 4x4 image
    write_ppm_grid(path, img, 1, 3, 4, 4);

    std::ifstream in(path, std::ios::binary);
    ASSERT_TRUE(in.good());
    std::string magic, dims1, dims2, maxval;
    in >> magic >> dims1 >> dims2 >> maxval;
    EXPECT_EQ(magic, "P6");
    EXPECT_EQ(dims1, "8");  // 1 tile of 4px + 2px padding each side
    EXPECT_EQ(dims2, "8");
    EXPECT_EQ(maxval, "255");
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> canvas(8 * 8 * 3);
    in.read(reinterpret_cast<char*>(canvas.data()), canvas.size());
    ASSERT_TRUE(in.good());
    // tile origin (2,2): white pixel
    const size_t at = (2 * 8 + 2) * 3;
    EXPECT_EQ(canvas[at], 255);
    EXPECT_EQ(canvas[at + 1], 255);
    EXPECT_EQ(canvas[at + 2], 255);
    // padding border keeps the background gray
    EXPECT_EQ(canvas[0], 32);

    EXPECT_THROW(write_ppm_grid(tmp_path("none.ppm"), img, 0, 3, 4, 4), DataError);
}

TEST(SyntheticDump, ManifestPayloadAndPreview) {
    SyntheticBatch batch;
    RandomEngine rng(3);
    batch.images = Tensor::rand_uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
    batch.labels = {0, 1};
    const auto dir = tmp_path("synthetic_dump");
    dump_synthetic(dir, batch);

    std::ifstream min(fs::path(dir) / "manifest.json");
    ASSERT_TRUE(min.good());
    auto manifest = json::parse(min);
    EXPECT_EQ(manifest.at("count").get<int>(), 2);
    EXPECT_EQ(manifest.at("channels").get<int>(), 3);
    EXPECT_EQ(manifest.at("height").get<int>(), 4);
    EXPECT_EQ(manifest.at("labels").get<std::vector<int>>(), (std::vector<int>{0, 1}));
    EXPECT_EQ(manifest.at("dtype").get<std::string>(), "float32");

    EXPECT_EQ(fs::file_size(fs::path(dir) / "images.f32"), 2u * 3 * 4 * 4 * 4);
    EXPECT_TRUE(fs::exists(fs::path(dir) / "preview.ppm"));

    SyntheticBatch bad;
    bad.images = Tensor::from_data({4}, {1.0f, 2.0f, 3.0f, 4.0f});
    EXPECT_THROW(dump_synthetic(tmp_path("bad_dump"), bad), ShapeError);
}
