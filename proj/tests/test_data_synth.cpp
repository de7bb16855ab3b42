#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "udr/cpb.hpp"
#include "udr/data_synth.hpp"
#include "udr/image_io.hpp"
#include "udr/metrics.hpp"
#include "udr/nn_ops.hpp"
#include "udr/rng.hpp"
#include "udr/tensor.hpp"

using udr::Rng;
using udr::Tensor;

namespace {

std::filesystem::path tmp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (long i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.shape() != b.shape()) return false;
    for (long i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

// Fraction of pixels darker than mid gray in luminance.
double ink_fraction(const Tensor<double>& page) {
    const long N = page.dim(1) * page.dim(2);
    const auto* d = page.data().data();
    long ink = 0;
    for (long i = 0; i < N; ++i) {
        const double lum = 0.299 * d[i] + 0.587 * d[N + i] + 0.114 * d[2 * N + i];
        if (lum < 0.5) ++ink;
    }
    return static_cast<double>(ink) / static_cast<double>(N);
}

} // namespace

TEST_CASE("ppm round trip preserves values to quantization accuracy") {
    Rng rng(11);
    const auto img = Tensor<double>::rand_uniform({3, 9, 7}, rng, 0.0, 1.0);
    const auto path = tmp_file("udr_io_rt.ppm");
    udr::write_ppm(path.string(), img);
    const auto back = udr::read_ppm<double>(path.string());
    REQUIRE(back.shape() == img.shape());
    CHECK(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);

    SECTION("re-encoding a decoded image is byte-identical") {
        const auto path2 = tmp_file("udr_io_rt2.ppm");
        udr::write_ppm(path2.string(), back);
        CHECK(file_bytes(path) == file_bytes(path2));
    }
}

TEST_CASE("pgm round trip preserves values to quantization accuracy") {
    Rng rng(12);
    const auto img = Tensor<double>::rand_uniform({1, 5, 6}, rng, 0.0, 1.0);
    const auto path = tmp_file("udr_io_rt.pgm");
    udr::write_pgm(path.string(), img);
    const auto back = udr::read_pgm<double>(path.string());
    REQUIRE(back.shape() == img.shape());
    CHECK(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("image io quantizes by rounding and clamps out-of-range values") {
    const auto img = Tensor<double>::from_data(
        {1, 1, 4}, {-0.25, 1.75, 2.0 / 255.0 + 0.4 / 255.0, 0.5});
    const auto path = tmp_file("udr_io_q.pgm");
    udr::write_pgm(path.string(), img);
    const auto bytes = file_bytes(path);
    // header "P5\n4 1\n255\n" is 11 bytes, then the raster
    REQUIRE(bytes.size() == 15);
    CHECK(static_cast<unsigned char>(bytes[11]) == 0);
    CHECK(static_cast<unsigned char>(bytes[12]) == 255);
    CHECK(static_cast<unsigned char>(bytes[13]) == 2);
    CHECK(static_cast<unsigned char>(bytes[14]) == 128);
}

TEST_CASE("image reader accepts header comments") {
    const auto path = tmp_file("udr_io_comment.ppm");
    {
        std::ofstream out(path, std::ios::binary);
        out << "P6\n# a comment line\n2 1\n# another\n255\n";
        const unsigned char px[6] = {10, 20, 30, 40, 50, 60};
        out.write(reinterpret_cast<const char*>(px), 6);
    }
    const auto img = udr::read_ppm<double>(path.string());
    REQUIRE(img.shape() == udr::Shape{3, 1, 2});
    CHECK(img.at({0, 0, 0}) == Catch::Approx(10.0 / 255.0));
    CHECK(img.at({2, 0, 1}) == Catch::Approx(60.0 / 255.0));
}

TEST_CASE("image io rejects malformed inputs") {
    SECTION("wrong tensor shape on write") {
        CHECK_THROWS_AS(udr::write_ppm(tmp_file("udr_bad.ppm").string(),
                                       Tensor<double>::zeros({1, 4, 4})),
                        std::invalid_argument);
        CHECK_THROWS_AS(udr::write_pgm(tmp_file("udr_bad.pgm").string(),
                                       Tensor<double>::zeros({3, 4, 4})),
                        std::invalid_argument);
    }
    SECTION("magic mismatch") {
        const auto path = tmp_file("udr_io_magic.pgm");
        udr::write_pgm(path.string(), Tensor<double>::zeros({1, 4, 4}));
        CHECK_THROWS_WITH(udr::read_ppm<double>(path.string()),
                          Catch::Matchers::ContainsSubstring("P6 magic"));
    }
    SECTION("unsupported maxval") {
        const auto path = tmp_file("udr_io_maxval.pgm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P5\n2 2\n65535\n";
            out.write("\0\0\0\0\0\0\0\0", 8);
        }
        CHECK_THROWS_WITH(udr::read_pgm<double>(path.string()),
                          Catch::Matchers::ContainsSubstring("maxval"));
    }
    SECTION("truncated raster") {
        const auto path = tmp_file("udr_io_trunc.ppm");
        {
            std::ofstream out(path, std::ios::binary);
            out << "P6\n4 4\n255\n";
            out.write("\1\2\3", 3);
        }
        CHECK_THROWS_WITH(udr::read_ppm<double>(path.string()),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(udr::read_ppm<double>(tmp_file("udr_io_nothere.ppm").string()),
                        std::runtime_error);
    }
}

TEST_CASE("clean pages are deterministic and stay in the paper/ink bands") {
    const auto a = udr::gen_clean_doc<double>(3, 32, 32);
    const auto b = udr::gen_clean_doc<double>(3, 32, 32);
    CHECK(bitwise_equal(a, b));
    CHECK_FALSE(bitwise_equal(a, udr::gen_clean_doc<double>(4, 32, 32)));

    double lo = 1.0, hi = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        lo = std::min(lo, a.data()[i]);
        hi = std::max(hi, a.data()[i]);
    }
    CHECK(lo >= 0.02);
    CHECK(hi <= 0.99);
}

TEST_CASE("clean page ink coverage stays within the budget band") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto page = udr::gen_clean_doc<double>(seed, 32, 32);
        const double frac = ink_fraction(page);
        INFO("seed " << seed << " ink fraction " << frac);
        CHECK(frac >= 0.02);
        CHECK(frac <= 0.25);
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double frac = ink_fraction(udr::gen_clean_doc<double>(seed, 64, 64));
        INFO("seed " << seed << " ink fraction " << frac);
        CHECK(frac >= 0.02);
        CHECK(frac <= 0.25);
    }
}

TEST_CASE("clean page generator handles non-square extents and rejects tiny ones") {
    const auto wide = udr::gen_clean_doc<double>(1, 32, 96);
    CHECK(wide.shape() == udr::Shape{3, 32, 96});
    CHECK(ink_fraction(wide) >= 0.02);
    const auto tall = udr::gen_clean_doc<double>(1, 96, 32);
    CHECK(tall.shape() == udr::Shape{3, 96, 32});
    CHECK_THROWS_AS(udr::gen_clean_doc<double>(0, 16, 64), std::invalid_argument);
    CHECK_THROWS_AS(udr::gen_clean_doc<double>(0, 64, 16), std::invalid_argument);
}

TEST_CASE("degradations are deterministic, in range, and shaped like the page") {
    const auto clean = udr::gen_clean_doc<double>(7, 32, 32);
    for (const auto& def : udr::task_registry()) {
        INFO("task " << def.name);
        const auto s = udr::degrade(def.name, clean, 42);
        CHECK(s.task == def.name);
        CHECK(s.seed == 42);
        CHECK_FALSE(s.has_bm);
        REQUIRE(s.input.shape() == clean.shape());
        REQUIRE(s.gt.shape() == clean.shape());
        double lo = 1.0, hi = 0.0;
        for (long i = 0; i < s.input.numel(); ++i) {
            lo = std::min(lo, s.input.data()[i]);
            hi = std::max(hi, s.input.data()[i]);
        }
        CHECK(lo >= 0.0);
        CHECK(hi <= 1.0);
        CHECK(bitwise_equal(s.input, udr::degrade(def.name, clean, 42).input));
        CHECK_FALSE(bitwise_equal(s.input, udr::degrade(def.name, clean, 43).input));
        // every recipe must actually perturb the page
        CHECK(max_abs_diff(s.input, clean) > 0.01);
    }
}

TEST_CASE("deblur pairs keep the clean page as target") {
    const auto clean = udr::gen_clean_doc<double>(8, 32, 32);
    const auto s = udr::degrade("deblur", clean, 1);
    CHECK(bitwise_equal(s.gt, clean));
    // blurring is mass preserving away from borders, so means stay close
    double m_in = 0, m_cl = 0;
    for (long i = 0; i < clean.numel(); ++i) {
        m_in += s.input.data()[i];
        m_cl += clean.data()[i];
    }
    CHECK(std::abs(m_in - m_cl) / clean.numel() < 0.01);
}

TEST_CASE("deshadow attenuates and never brightens") {
    const auto clean = udr::gen_clean_doc<double>(9, 32, 32);
    const auto s = udr::degrade("deshadow", clean, 2);
    CHECK(bitwise_equal(s.gt, clean));
    for (long i = 0; i < clean.numel(); ++i) {
        CHECK(s.input.data()[i] <= clean.data()[i] + 1e-12);
        CHECK(s.input.data()[i] >= 0.39 * clean.data()[i] - 1e-12);
    }
}

TEST_CASE("illumination ramp attenuates within its advertised band") {
    const auto clean = udr::gen_clean_doc<double>(10, 32, 32);
    const auto s = udr::degrade("illuminate", clean, 3);
    CHECK(bitwise_equal(s.gt, clean));
    for (long i = 0; i < clean.numel(); ++i) {
        CHECK(s.input.data()[i] <= clean.data()[i] + 1e-12);
        CHECK(s.input.data()[i] >= 0.49 * clean.data()[i] - 1e-12);
    }
}

TEST_CASE("binarize targets are strictly two level") {
    const auto clean = udr::gen_clean_doc<double>(11, 32, 32);
    const auto s = udr::degrade("binarize", clean, 4);
    long zeros = 0, ones = 0;
    for (long i = 0; i < s.gt.numel(); ++i) {
        const double v = s.gt.data()[i];
        if (v == 0.0)
            ++zeros;
        else if (v == 1.0)
            ++ones;
        else
            FAIL("gt value " << v << " is neither 0 nor 1");
    }
    CHECK(zeros > 0);
    CHECK(ones > 0);
    // channels agree: the target is monochrome
    const long N = 32 * 32;
    for (long i = 0; i < N; ++i) {
        CHECK(s.gt.data()[i] == s.gt.data()[N + i]);
        CHECK(s.gt.data()[i] == s.gt.data()[2 * N + i]);
    }
}

TEST_CASE("handwriting overlay darkens a bounded region and keeps gt clean") {
    const auto clean = udr::gen_clean_doc<double>(12, 32, 32);
    const auto s = udr::degrade("hw_remove", clean, 5);
    CHECK(bitwise_equal(s.gt, clean));
    long changed = 0;
    for (long i = 0; i < clean.numel(); ++i)
        if (s.input.data()[i] != clean.data()[i]) ++changed;
    CHECK(changed >= 10);
    CHECK(changed < clean.numel() / 2);
}

TEST_CASE("denoise pairs perturb most pixels") {
    const auto clean = udr::gen_clean_doc<double>(13, 32, 32);
    const auto s = udr::degrade("denoise", clean, 6);
    CHECK(bitwise_equal(s.gt, clean));
    long moved = 0;
    for (long i = 0; i < clean.numel(); ++i)
        if (std::abs(s.input.data()[i] - clean.data()[i]) > 0.01) ++moved;
    CHECK(moved > clean.numel() / 3);
}

TEST_CASE("degrade rejects unknown tasks and bad shapes") {
    const auto clean = udr::gen_clean_doc<double>(14, 32, 32);
    CHECK_THROWS_AS(udr::degrade("dewarp", clean, 0), std::invalid_argument);
    CHECK_THROWS_AS(udr::degrade("sharpen", clean, 0), std::invalid_argument);
    CHECK_THROWS_AS(udr::degrade("deblur", Tensor<double>::zeros({1, 32, 32}), 0),
                    std::invalid_argument);
}

TEST_CASE("dewarp with the identity map reproduces the image") {
    Rng rng(20);
    const auto img = Tensor<double>::rand_uniform({1, 3, 24, 20}, rng, 0.0, 1.0);
    const auto bm = udr::identity_grid<double>(1, 16, 16);
    const auto out = udr::dewarp(img, bm);
    REQUIRE(out.shape() == img.shape());
    CHECK(max_abs_diff(out, img) < 1e-12);
}

TEST_CASE("dewarp validates its inputs") {
    const auto img = Tensor<double>::zeros({1, 3, 16, 16});
    CHECK_THROWS_AS(udr::dewarp(img, Tensor<double>::zeros({1, 3, 8, 8})), std::invalid_argument);
    CHECK_THROWS_AS(udr::dewarp(img, Tensor<double>::zeros({2, 2, 8, 8})), std::invalid_argument);
    CHECK_THROWS_AS(udr::dewarp(Tensor<double>::zeros({3, 16, 16}),
                                Tensor<double>::zeros({1, 2, 8, 8})),
                    std::invalid_argument);
}

TEST_CASE("zero-amplitude warp pairs are the identity") {
    const auto s = udr::gen_warp_pair<double>(5, 64, 64, 0.0);
    REQUIRE(s.has_bm);
    CHECK(s.task == "dewarp");
    REQUIRE(s.bm_gt.shape() == udr::Shape{2, udr::kWarpGrid, udr::kWarpGrid});
    const auto id = udr::identity_grid<double>(1, udr::kWarpGrid, udr::kWarpGrid);
    for (long i = 0; i < s.bm_gt.numel(); ++i)
        CHECK(std::abs(s.bm_gt.data()[i] - id.data()[i]) < 1e-12);
    CHECK(max_abs_diff(s.input, s.gt) < 1e-9);
}

TEST_CASE("warp pairs are deterministic and carry in-range maps") {
    const auto a = udr::gen_warp_pair<double>(17, 64, 64);
    const auto b = udr::gen_warp_pair<double>(17, 64, 64);
    CHECK(bitwise_equal(a.input, b.input));
    CHECK(bitwise_equal(a.gt, b.gt));
    CHECK(bitwise_equal(a.bm_gt, b.bm_gt));
    for (long i = 0; i < a.bm_gt.numel(); ++i) {
        CHECK(a.bm_gt.data()[i] >= -1.0);
        CHECK(a.bm_gt.data()[i] <= 1.0);
    }
    CHECK(max_abs_diff(a.input, a.gt) > 0.01);
    CHECK_THROWS_AS(udr::gen_warp_pair<double>(0, 16, 64), std::invalid_argument);
    CHECK_THROWS_AS(udr::gen_warp_pair<double>(0, 64, 64, -1.0), std::invalid_argument);
}

TEST_CASE("ground-truth maps reconstruct the flat page above 25 dB") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto s = udr::gen_warp_pair<double>(seed, 64, 64);
        const auto dist4 = udr::reshape(s.input, {1, 3, 64, 64});
        const auto flat4 = udr::reshape(s.gt, {1, 3, 64, 64});
        const auto fixed = udr::dewarp(dist4, udr::reshape(s.bm_gt, {1, 2, 16, 16}));
        const double p_fixed = udr::psnr(fixed, flat4);
        INFO("seed " << seed << " dewarped psnr " << p_fixed);
        CHECK(p_fixed > 25.0);
        if (seed < 5) {
            const double p_raw = udr::psnr(dist4, flat4);
            INFO("raw psnr " << p_raw);
            CHECK(p_fixed > p_raw);
        }
    }
}

TEST_CASE("sample factory dispatches on the task name") {
    const auto warped = udr::make_sample<double>("dewarp", 2, 64, 64);
    CHECK(warped.has_bm);
    CHECK(warped.task == "dewarp");
    const auto pixel = udr::make_sample<double>("deblur", 2, 32, 32);
    CHECK_FALSE(pixel.has_bm);
    CHECK(pixel.task == "deblur");
    CHECK(pixel.input.shape() == udr::Shape{3, 32, 32});
    // same seed, different tasks draw from distinct streams
    const auto other = udr::make_sample<double>("denoise", 2, 32, 32);
    CHECK_FALSE(bitwise_equal(pixel.input, other.input));
}

TEST_CASE("float pages match double pages after rounding") {
    const auto d = udr::gen_clean_doc<double>(21, 32, 32);
    const auto f = udr::gen_clean_doc<float>(21, 32, 32);
    REQUIRE(d.shape() == f.shape());
    double m = 0;
    for (long i = 0; i < d.numel(); ++i)
        m = std::max(m, std::abs(d.data()[i] - static_cast<double>(f.data()[i])));
    CHECK(m < 1e-6);
}
