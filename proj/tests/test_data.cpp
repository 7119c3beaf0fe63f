#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "moedet/data.hpp"
#include "moedet/error.hpp"
#include "moedet/serial.hpp"

using moedet::Scene;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/moedet_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

bool scenes_equal(const Scene& a, const Scene& b) {
    if (a.size != b.size || a.image != b.image || a.objects.size() != b.objects.size()) return false;
    for (size_t i = 0; i < a.objects.size(); ++i) {
        const auto& x = a.objects[i];
        const auto& y = b.objects[i];
        if (x.class_id != y.class_id) return false;
        if (x.box.x1 != y.box.x1 || x.box.y1 != y.box.y1 || x.box.x2 != y.box.x2 || x.box.y2 != y.box.y2)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("generate_scene is deterministic in (seed, index) and differs across them") {
    const auto dom = moedet::domain_spec('A');
    Scene a = moedet::generate_scene(dom, 7, 3);
    Scene b = moedet::generate_scene(dom, 7, 3);
    CHECK(scenes_equal(a, b));
    Scene c = moedet::generate_scene(dom, 7, 4);
    CHECK_FALSE(scenes_equal(a, c));
    Scene d = moedet::generate_scene(dom, 8, 3);
    CHECK_FALSE(scenes_equal(a, d));
    // The two domains draw from separate streams even at equal (seed, index).
    Scene e = moedet::generate_scene(moedet::domain_spec('B'), 7, 3);
    CHECK_FALSE(scenes_equal(a, e));
}

TEST_CASE("scenes respect the documented invariants") {
    for (char name : {'A', 'B'}) {
        const auto dom = moedet::domain_spec(name);
        for (int i = 0; i < 100; ++i) {
            Scene s = moedet::generate_scene(dom, 11, i);
            CHECK(s.size == dom.image_size);
            REQUIRE(s.image.size() == static_cast<size_t>(3 * s.size * s.size));
            for (float v : s.image) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
            CHECK(s.objects.size() >= 1);
            CHECK(s.objects.size() <= 4);
            for (const auto& o : s.objects) {
                CHECK(o.box.x1 >= 0.0);
                CHECK(o.box.y1 >= 0.0);
                CHECK(o.box.x2 <= s.size);
                CHECK(o.box.y2 <= s.size);
                CHECK(o.box.x2 - o.box.x1 >= 3.0);
                CHECK(o.box.y2 - o.box.y1 >= 3.0);
                CHECK(o.class_id >= 0);
                CHECK(o.class_id < moedet::kNumClasses);
            }
        }
    }
}

TEST_CASE("domain A object sizes stay within the configured range over 1000 scenes") {
    const auto dom = moedet::domain_spec('A');
    for (int i = 0; i < 1000; ++i) {
        Scene s = moedet::generate_scene(dom, 5, i);
        for (const auto& o : s.objects) {
            const double max_side = std::max(o.box.x2 - o.box.x1, o.box.y2 - o.box.y1);
            CHECK(max_side >= dom.size_lo);
            CHECK(max_side <= dom.size_hi);
        }
    }
}

TEST_CASE("class frequencies are balanced across 1000 scenes per domain") {
    for (char name : {'A', 'B'}) {
        const auto dom = moedet::domain_spec(name);
        std::array<int, moedet::kNumClasses> counts{};
        int total = 0;
        for (int i = 0; i < 1000; ++i) {
            Scene s = moedet::generate_scene(dom, 21, i);
            for (const auto& o : s.objects) {
                ++counts[static_cast<size_t>(o.class_id)];
                ++total;
            }
        }
        for (int c = 0; c < moedet::kNumClasses; ++c) {
            const double freq = static_cast<double>(counts[static_cast<size_t>(c)]) / total;
            CHECK(freq >= 0.15);
            CHECK(freq <= 0.35);
        }
    }
}

TEST_CASE("domain B scenes are small-object and dark, domain A large and bright") {
    const auto a = moedet::generate_scene(moedet::domain_spec('A'), 3, 0);
    const auto b = moedet::generate_scene(moedet::domain_spec('B'), 3, 0);
    for (const auto& o : b.objects) CHECK(o.box.x2 - o.box.x1 <= 12.0);
    for (const auto& o : a.objects) CHECK(o.box.x2 - o.box.x1 >= 14.0);
    auto mean_px = [](const Scene& s) {
        double m = 0;
        for (float v : s.image) m += v;
        return m / s.image.size();
    };
    CHECK(mean_px(a) > 0.5);
    CHECK(mean_px(b) < 0.5);
}

TEST_CASE("dataset round-trip is exact") {
    TempFile tf("roundtrip.moed");
    auto scenes = moedet::generate_scenes(moedet::domain_spec('B'), 13, 10);
    moedet::write_dataset(scenes, tf.path);
    auto loaded = moedet::read_dataset(tf.path);
    REQUIRE(loaded.size() == scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) CHECK(scenes_equal(scenes[i], loaded[i]));
}

TEST_CASE("empty dataset writes and reads back") {
    TempFile tf("empty.moed");
    moedet::write_dataset({}, tf.path);
    CHECK(moedet::read_dataset(tf.path).empty());
}

TEST_CASE("corruption is caught and named") {
    TempFile tf("corrupt.moed");
    auto scenes = moedet::generate_scenes(moedet::domain_spec('A'), 1, 3);
    moedet::write_dataset(scenes, tf.path);
    auto bytes = moedet::read_file(tf.path);

    SUBCASE("payload byte flip trips the record checksum") {
        // Flip one pixel byte inside record 1's payload.
        const size_t header = 12;
        const size_t record = 12 + static_cast<size_t>(3 * 64 * 64) * 4;  // dims + pixels, before objects
        bytes[header + record + 200] ^= 0x01;
        moedet::write_file(tf.path, bytes);
        try {
            moedet::read_dataset(tf.path);
            FAIL("expected io_error");
        } catch (const moedet::io_error& e) {
            CHECK(std::string(e.what()).find("record") != std::string::npos);
        }
    }
    SUBCASE("truncation names the offending record") {
        bytes.resize(bytes.size() - 5);
        moedet::write_file(tf.path, bytes);
        try {
            moedet::read_dataset(tf.path);
            FAIL("expected io_error");
        } catch (const moedet::io_error& e) {
            CHECK(std::string(e.what()).find("record 2") != std::string::npos);
        }
    }
    SUBCASE("bad magic is rejected") {
        bytes[0] = 'X';
        moedet::write_file(tf.path, bytes);
        CHECK_THROWS_AS(moedet::read_dataset(tf.path), moedet::io_error);
    }
    SUBCASE("degenerate ground-truth box is rejected at load") {
        auto bad = scenes;
        REQUIRE(!bad[1].objects.empty());
        bad[1].objects[0].box.x2 = bad[1].objects[0].box.x1;  // zero width
        moedet::write_dataset(bad, tf.path);
        try {
            moedet::read_dataset(tf.path);
            FAIL("expected io_error");
        } catch (const moedet::io_error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("degenerate") != std::string::npos);
            CHECK(msg.find("record 1") != std::string::npos);
        }
    }
}

TEST_CASE("missing file raises io_error") {
    CHECK_THROWS_AS(moedet::read_dataset("/tmp/moedet_does_not_exist.moed"), moedet::io_error);
}
