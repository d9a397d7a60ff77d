#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "marrowcast/patches.hpp"

#include "helpers.hpp"

using namespace marrowcast;

namespace {

slice2d random_slice(int w, int h, std::mt19937_64& eng) {
    slice2d s(w, h);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (float& v : s.data) v = static_cast<float>(u(eng));
    return s;
}

} // namespace

TEST_CASE("the r=2 dilation disk is exactly the 13-pixel Euclidean disk") {
    // single seed pixel in the middle of an empty slice
    slice2d seed(9, 9, 0.0f);
    seed.at(4, 4) = 1.0f;
    const slice2d out = binarize_and_dilate(seed, 0.5, 2);

    std::set<std::pair<int, int>> got;
    for (int y = 0; y < 9; ++y) {
        for (int x = 0; x < 9; ++x) {
            if (out.at(x, y) == 1.0f) got.insert({x - 4, y - 4});
        }
    }
    const std::set<std::pair<int, int>> want = {
        {0, -2}, {-1, -1}, {0, -1}, {1, -1}, {-2, 0}, {-1, 0}, {0, 0},
        {1, 0},  {2, 0},   {-1, 1}, {0, 1},  {1, 1},  {0, 2},
    };
    REQUIRE(got.size() == 13);
    REQUIRE(got == want);

    for (float v : out.data) REQUIRE((v == 0.0f || v == 1.0f));
}

TEST_CASE("binarize_and_dilate thresholds inclusively and clips at borders") {
    slice2d s(5, 5, 0.0f);
    s.at(0, 0) = 0.5f;  // exactly at threshold -> bone
    s.at(4, 4) = 0.49f; // below -> background
    const slice2d out = binarize_and_dilate(s, 0.5, 1);
    REQUIRE(out.at(0, 0) == 1.0f);
    REQUIRE(out.at(1, 0) == 1.0f);
    REQUIRE(out.at(0, 1) == 1.0f);
    REQUIRE(out.at(1, 1) == 0.0f); // r=1 disk is the 5-pixel plus shape
    REQUIRE(out.at(4, 4) == 0.0f);
    REQUIRE(out.at(3, 4) == 0.0f);

    // radius 0 is plain binarization
    const slice2d bin = binarize_and_dilate(s, 0.5, 0);
    REQUIRE(bin.at(0, 0) == 1.0f);
    REQUIRE(bin.at(1, 0) == 0.0f);

    REQUIRE_THROWS_AS(binarize_and_dilate(s, 0.5, -1), config_error);
}

TEST_CASE("dilation grows a region by the disk radius in every direction") {
    slice2d s(21, 21, 0.0f);
    for (int y = 9; y <= 11; ++y) {
        for (int x = 9; x <= 11; ++x) s.at(x, y) = 1.0f;
    }
    const slice2d out = binarize_and_dilate(s, 0.5, 2);
    int count = 0;
    for (int y = 0; y < 21; ++y) {
        for (int x = 0; x < 21; ++x) {
            // expected: union of r=2 disks over the 3x3 seed block
            bool expect = false;
            for (int sy = 9; sy <= 11 && !expect; ++sy) {
                for (int sx = 9; sx <= 11 && !expect; ++sx) {
                    expect = (x - sx) * (x - sx) + (y - sy) * (y - sy) <= 4;
                }
            }
            REQUIRE(out.at(x, y) == (expect ? 1.0f : 0.0f));
            count += expect;
        }
    }
    REQUIRE(count > 9);
}

TEST_CASE("mask_crop zeroes everything outside the mask") {
    std::mt19937_64 eng(31);
    const slice2d img = random_slice(8, 6, eng);
    slice2d mask(8, 6, 0.0f);
    mask.at(2, 3) = 1.0f;
    mask.at(5, 1) = 1.0f;
    const slice2d out = mask_crop(img, mask);
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 8; ++x) {
            const bool keep = (x == 2 && y == 3) || (x == 5 && y == 1);
            REQUIRE(out.at(x, y) == (keep ? img.at(x, y) : 0.0f));
        }
    }
    REQUIRE_THROWS_AS(mask_crop(img, slice2d(7, 6)), shape_error);
}

TEST_CASE("reflect indexing folds like numpy reflect without edge repeats") {
    // pattern for n=4: ... 2 1 | 0 1 2 3 | 2 1 0 1 ...
    REQUIRE(detail::reflect_index(0, 4) == 0);
    REQUIRE(detail::reflect_index(3, 4) == 3);
    REQUIRE(detail::reflect_index(-1, 4) == 1);
    REQUIRE(detail::reflect_index(-2, 4) == 2);
    REQUIRE(detail::reflect_index(4, 4) == 2);
    REQUIRE(detail::reflect_index(5, 4) == 1);
    REQUIRE(detail::reflect_index(6, 4) == 0);
    REQUIRE(detail::reflect_index(7, 4) == 1);
    REQUIRE(detail::reflect_index(-3, 4) == 3);
    REQUIRE(detail::reflect_index(0, 1) == 0);
    REQUIRE(detail::reflect_index(-5, 1) == 0);
}

TEST_CASE("extract_patches centers on the stride lattice restricted to bone") {
    slice2d img(16, 16, 0.3f);
    slice2d bone(16, 16, 0.0f);
    // bone at lattice points (4,4), (6,4), (4,6), and one off-lattice at (5,5)
    bone.at(4, 4) = 1.0f;
    bone.at(6, 4) = 1.0f;
    bone.at(4, 6) = 1.0f;
    bone.at(5, 5) = 1.0f;
    const patch_batch b = extract_patches(img, bone, 8, 2);
    REQUIRE(b.grid.centers ==
            std::vector<std::pair<int, int>>{{4, 4}, {6, 4}, {4, 6}}); // row-major order
    REQUIRE(b.patches.n == 3);
    REQUIRE(b.patches.h == 8);
    REQUIRE(b.patches.w == 8);

    // full-bone slice: every lattice point is a center
    const patch_batch full = extract_patches(img, slice2d(16, 16, 1.0f), 8, 2);
    REQUIRE(full.grid.centers.size() == 8 * 8);

    REQUIRE_THROWS_AS(extract_patches(img, slice2d(15, 16, 1.0f), 8, 2), shape_error);
    REQUIRE_THROWS_AS(extract_patches(img, bone, 0, 2), config_error);
    REQUIRE_THROWS_AS(extract_patches(img, bone, 8, 0), config_error);
}

TEST_CASE("the published-scale lattice has ceil(384/2)^2 candidate centers") {
    slice2d img(384, 384, 0.1f);
    const patch_batch b = extract_patches(img, slice2d(384, 384, 1.0f), 64, 2);
    REQUIRE(b.grid.centers.size() == 192u * 192u);
}

TEST_CASE("extracted windows read the image through reflect padding") {
    std::mt19937_64 eng(32);
    const slice2d img = random_slice(10, 10, eng);
    patch_grid grid;
    grid.patch_size = 6;
    grid.stride = 2;
    grid.width = 10;
    grid.height = 10;
    grid.centers = {{0, 0}, {5, 5}, {9, 9}};
    const tensor4f w = extract_windows(img, grid);
    REQUIRE(w.n == 3);
    for (int pi = 0; pi < 3; ++pi) {
        const auto [cx, cy] = grid.centers[static_cast<std::size_t>(pi)];
        for (int dy = 0; dy < 6; ++dy) {
            for (int dx = 0; dx < 6; ++dx) {
                const int sx = detail::reflect_index(cx - 3 + dx, 10);
                const int sy = detail::reflect_index(cy - 3 + dy, 10);
                REQUIRE(w.at(pi, 0, dy, dx) == img.at(sx, sy));
            }
        }
    }
    REQUIRE_THROWS_AS(extract_windows(slice2d(9, 10), grid), shape_error);
}

TEST_CASE("reconstruction averages exactly the covering windows") {
    // two centers with overlapping 4x4 windows; verify counts and means by hand
    patch_grid grid;
    grid.patch_size = 4;
    grid.stride = 2;
    grid.width = 12;
    grid.height = 8;
    grid.centers = {{4, 4}, {6, 4}};
    tensor4f preds(2, 1, 4, 4);
    for (std::size_t i = 0; i < 16; ++i) preds.data[i] = 0.25f;
    for (std::size_t i = 16; i < 32; ++i) preds.data[i] = 0.75f;

    const risk_slice r = reconstruct_risk_map(grid, preds, fusion_mode::mean);
    // window 0 covers x in [2,5], y in [2,5]; window 1 covers x in [4,7]
    REQUIRE(r.coverage[r.risk.index(2, 3)] == 1);
    REQUIRE(r.risk.at(2, 3) == 0.25f);
    REQUIRE(r.coverage[r.risk.index(7, 5)] == 1);
    REQUIRE(r.risk.at(7, 5) == 0.75f);
    REQUIRE(r.coverage[r.risk.index(4, 4)] == 2);
    REQUIRE(r.risk.at(4, 4) == 0.5f);
    REQUIRE(r.coverage[r.risk.index(0, 0)] == 0);
    REQUIRE(r.risk.at(0, 0) == 0.0f);

    const risk_slice rmax = reconstruct_risk_map(grid, preds, fusion_mode::max);
    REQUIRE(rmax.risk.at(4, 4) == 0.75f);
    REQUIRE(rmax.risk.at(2, 3) == 0.25f);

    const risk_slice rc = reconstruct_risk_map(grid, preds, fusion_mode::center_only);
    REQUIRE(rc.coverage[rc.risk.index(4, 4)] == 1);
    REQUIRE(rc.risk.at(4, 4) == 0.25f);
    REQUIRE(rc.coverage[rc.risk.index(6, 4)] == 1);
    REQUIRE(rc.risk.at(6, 4) == 0.75f);
    REQUIRE(rc.coverage[rc.risk.index(5, 4)] == 0);

    REQUIRE_THROWS_AS(reconstruct_risk_map(grid, tensor4f(3, 1, 4, 4)), shape_error);
    REQUIRE_THROWS_AS(reconstruct_risk_map(grid, tensor4f(2, 1, 5, 4)), shape_error);
}

TEST_CASE("windows written outside the image are dropped, not reflected back") {
    patch_grid grid;
    grid.patch_size = 4;
    grid.stride = 1;
    grid.width = 6;
    grid.height = 6;
    grid.centers = {{0, 0}}; // window spans x,y in [-2, 1]
    tensor4f preds(1, 1, 4, 4);
    for (auto& v : preds.data) v = 1.0f;
    const risk_slice r = reconstruct_risk_map(grid, preds);
    int covered = 0;
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
            covered += r.coverage[r.risk.index(x, y)];
            if (x <= 1 && y <= 1) {
                REQUIRE(r.risk.at(x, y) == 1.0f);
            } else {
                REQUIRE(r.risk.at(x, y) == 0.0f);
            }
        }
    }
    REQUIRE(covered == 4); // only the in-image quarter of the window lands
}

TEST_CASE("ground-truth windows reconstruct the annotation exactly where covered") {
    // oracle for the cascade's target plumbing: feed the *annotation windows*
    // themselves as predictions; fully-covered annotation pixels must come
    // back exactly, i.e. the lattice bookkeeping is lossless (AUC would be 1)
    std::mt19937_64 eng(33);
    slice2d annotation(32, 32, 0.0f);
    for (int y = 10; y < 16; ++y) {
        for (int x = 7; x < 13; ++x) annotation.at(x, y) = 1.0f;
    }
    for (int y = 20; y < 23; ++y) {
        for (int x = 24; x < 28; ++x) annotation.at(x, y) = 1.0f;
    }
    const slice2d img = random_slice(32, 32, eng);
    const slice2d bone(32, 32, 1.0f);

    for (const int stride : {1, 2, 4}) {
        const patch_batch b = extract_patches(img, bone, 8, stride);
        const tensor4f target_windows = extract_windows(annotation, b.grid);
        const risk_slice r = reconstruct_risk_map(b.grid, target_windows, fusion_mode::mean);
        std::vector<double> scores;
        std::vector<int> labels;
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                if (r.coverage[r.risk.index(x, y)] == 0) continue;
                // interior pixels see only windows whose reflected reads are
                // the identity, so the mean of identical copies is exact
                if (x >= 4 && x < 28 && y >= 4 && y < 28) {
                    REQUIRE(r.risk.at(x, y) == annotation.at(x, y));
                }
                scores.push_back(r.risk.at(x, y));
                labels.push_back(annotation.at(x, y) >= 0.5f ? 1 : 0);
            }
        }
        const double auc = testutil::brute_auc(scores, labels);
        INFO("stride " << stride);
        REQUIRE(auc == 1.0);
    }
}

TEST_CASE("fusion mode names roundtrip") {
    for (const fusion_mode f : {fusion_mode::mean, fusion_mode::max, fusion_mode::center_only}) {
        REQUIRE(fusion_mode_from_string(to_string(f)) == f);
    }
    REQUIRE_THROWS_AS(fusion_mode_from_string("median"), config_error);
}
