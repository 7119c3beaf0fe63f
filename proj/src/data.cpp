#include "moedet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "moedet/error.hpp"
#include "moedet/rng.hpp"
#include "moedet/serial.hpp"

namespace moedet {

const char* class_name(int class_id) {
    static const char* names[kNumClasses] = {"disc", "square", "triangle", "cross"};
    if (class_id < 0 || class_id >= kNumClasses) throw config_error("class id out of range");
    return names[class_id];
}

DomainSpec domain_spec(char name) {
    DomainSpec d;
    if (name == 'A') {
        d = DomainSpec{'A', 64, 1, 2, 14, 30, 0.75, 0.95, 0.02, 0, 0, false};
    } else if (name == 'B') {
        d = DomainSpec{'B', 64, 2, 4, 6, 12, 0.05, 0.25, 0.04, 3, 6, true};
    } else {
        throw config_error(std::string("unknown domain '") + name + "', expected A or B");
    }
    return d;
}

namespace {

void validate(const DomainSpec& d) {
    const int s = d.image_size;
    const int lo_bound = d.name == 'A' ? 6 : 3;
    const int hi_bound = d.name == 'A' ? s / 2 : s / 4;
    if (d.size_lo < lo_bound || d.size_hi > hi_bound || d.size_lo > d.size_hi)
        throw config_error("domain object-size range outside its allowed bounds");
    if (d.min_objects < 1 || d.max_objects > 4 || d.min_objects > d.max_objects)
        throw config_error("domain object count must stay within 1..4");
}

// Rasterizes one shape into mask (1 = covered) at integer grid (x0, y0),
// nominal side s. Returns false if nothing was covered.
bool rasterize(int shape, int x0, int y0, int s, int image_size, std::vector<uint8_t>& mask) {
    std::fill(mask.begin(), mask.end(), uint8_t(0));
    bool any = false;
    auto cover = [&](int r, int c) {
        if (r < 0 || c < 0 || r >= image_size || c >= image_size) return;
        mask[static_cast<size_t>(r) * image_size + c] = 1;
        any = true;
    };
    const double cx = x0 + s / 2.0, cy = y0 + s / 2.0;
    switch (shape) {
        case 0: {  // disc
            const double rad = s / 2.0;
            for (int r = y0; r < y0 + s; ++r)
                for (int c = x0; c < x0 + s; ++c) {
                    const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
                    if (dx * dx + dy * dy <= rad * rad) cover(r, c);
                }
            break;
        }
        case 1: {  // square
            for (int r = y0; r < y0 + s; ++r)
                for (int c = x0; c < x0 + s; ++c) cover(r, c);
            break;
        }
        case 2: {  // triangle, apex up
            for (int r = y0; r < y0 + s; ++r) {
                const double t = (r - y0 + 0.5) / s;
                const double half = t * s / 2.0;
                for (int c = x0; c < x0 + s; ++c)
                    if (std::abs(c + 0.5 - cx) <= half) cover(r, c);
            }
            break;
        }
        case 3: {  // cross
            const int t = std::max(3, s / 3);
            const int o = (s - t) / 2;
            for (int r = y0; r < y0 + s; ++r)
                for (int c = x0 + o; c < x0 + o + t; ++c) cover(r, c);
            for (int r = y0 + o; r < y0 + o + t; ++r)
                for (int c = x0; c < x0 + s; ++c) cover(r, c);
            break;
        }
        default:
            throw config_error("unknown shape id");
    }
    return any;
}

Box tight_bounds(const std::vector<uint8_t>& mask, int image_size) {
    int xmin = image_size, ymin = image_size, xmax = -1, ymax = -1;
    for (int r = 0; r < image_size; ++r)
        for (int c = 0; c < image_size; ++c)
            if (mask[static_cast<size_t>(r) * image_size + c]) {
                xmin = std::min(xmin, c);
                xmax = std::max(xmax, c);
                ymin = std::min(ymin, r);
                ymax = std::max(ymax, r);
            }
    return Box{static_cast<double>(xmin), static_cast<double>(ymin), static_cast<double>(xmax + 1),
               static_cast<double>(ymax + 1)};
}

}  // namespace

Scene generate_scene(const DomainSpec& domain, uint64_t seed, int index) {
    validate(domain);
    const int S = domain.image_size;
    const uint64_t stream = static_cast<uint64_t>(index) * 2 + (domain.name == 'A' ? 0 : 1);
    Rng rng(seed, stream);

    Scene scene;
    scene.size = S;
    scene.image.assign(static_cast<size_t>(3) * S * S, 0.0f);

    // Background: per-channel brightness in the domain's regime.
    for (int ch = 0; ch < 3; ++ch) {
        const float v = static_cast<float>(rng.uniform(domain.bg_lo, domain.bg_hi));
        std::fill_n(scene.image.begin() + static_cast<size_t>(ch) * S * S, static_cast<size_t>(S) * S, v);
    }

    // Clutter: unlabeled dim rectangles under the objects.
    const int clutter = domain.clutter_hi > 0 ? rng.uniform_int(domain.clutter_lo, domain.clutter_hi) : 0;
    for (int i = 0; i < clutter; ++i) {
        const int w = rng.uniform_int(2, 8), h = rng.uniform_int(2, 8);
        const int x = rng.uniform_int(0, S - w), y = rng.uniform_int(0, S - h);
        const float lift = static_cast<float>(rng.uniform(0.08, 0.22));
        for (int ch = 0; ch < 3; ++ch)
            for (int r = y; r < y + h; ++r)
                for (int c = x; c < x + w; ++c) scene.px(ch, r, c) = std::min(1.0f, scene.px(ch, r, c) + lift);
    }

    // Classes are distinct within a scene, drawn from a shuffled deck so the
    // long-run class balance is uniform.
    const int count = rng.uniform_int(domain.min_objects, domain.max_objects);
    std::array<int, kNumClasses> deck{0, 1, 2, 3};
    for (int i = kNumClasses - 1; i > 0; --i) std::swap(deck[static_cast<size_t>(i)], deck[static_cast<size_t>(rng.uniform_int(0, i))]);

    static const double base_color[kNumClasses][3] = {
        {0.85, 0.20, 0.20}, {0.20, 0.75, 0.25}, {0.25, 0.35, 0.90}, {0.90, 0.80, 0.20}};

    std::vector<uint8_t> mask(static_cast<size_t>(S) * S);
    for (int obj = 0; obj < count; ++obj) {
        const int class_id = deck[static_cast<size_t>(obj)];
        int s = 0, x0 = 0, y0 = 0;
        Box box{};
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            s = rng.uniform_int(domain.size_lo, domain.size_hi);
            x0 = rng.uniform_int(1, S - 1 - s);
            y0 = rng.uniform_int(1, S - 1 - s);
            Box cand{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x0 + s),
                     static_cast<double>(y0 + s)};
            placed = true;
            for (const auto& prev : scene.objects)
                if (iou(cand, prev.box) >= 0.3) placed = false;
        }
        if (!rasterize(class_id, x0, y0, s, S, mask)) continue;
        box = tight_bounds(mask, S);

        double color[3];
        for (int ch = 0; ch < 3; ++ch) {
            const double scale = domain.bright_objects ? rng.uniform(0.75, 1.1) : rng.uniform(0.35, 0.6);
            color[ch] = std::clamp(base_color[class_id][ch] * scale + (domain.bright_objects ? 0.15 : 0.0), 0.0, 1.0);
        }
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c)
                if (mask[static_cast<size_t>(r) * S + c])
                    for (int ch = 0; ch < 3; ++ch) scene.px(ch, r, c) = static_cast<float>(color[ch]);

        scene.objects.push_back(GtObject{box, class_id});
    }

    // Pixel noise last; bounds come from clean masks.
    for (auto& v : scene.image)
        v = std::clamp(v + static_cast<float>(rng.normal() * domain.noise_sigma), 0.0f, 1.0f);

    return scene;
}

std::vector<Scene> generate_scenes(const DomainSpec& domain, uint64_t seed, int count, int index_offset) {
    std::vector<Scene> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(generate_scene(domain, seed, index_offset + i));
    return out;
}

namespace {
constexpr uint32_t kDatasetVersion = 1;
}

void write_dataset(const std::vector<Scene>& scenes, const std::string& path) {
    ByteWriter w;
    w.raw(reinterpret_cast<const uint8_t*>("MOED"), 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<uint32_t>(scenes.size()));
    for (const Scene& s : scenes) {
        ByteWriter rec;
        rec.u32(3);
        rec.u32(static_cast<uint32_t>(s.size));
        rec.u32(static_cast<uint32_t>(s.size));
        for (float v : s.image) rec.f32(v);
        rec.u32(static_cast<uint32_t>(s.objects.size()));
        for (const GtObject& o : s.objects) {
            rec.f32(static_cast<float>(o.box.x1));
            rec.f32(static_cast<float>(o.box.y1));
            rec.f32(static_cast<float>(o.box.x2));
            rec.f32(static_cast<float>(o.box.y2));
            rec.u32(static_cast<uint32_t>(o.class_id));
        }
        w.raw(rec.buf.data(), rec.buf.size());
        w.u32(crc32(rec.buf.data(), rec.buf.size()));
    }
    write_file(path, w.buf);
}

std::vector<Scene> read_dataset(const std::string& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    try {
        char magic[4];
        for (char& m : magic) m = static_cast<char>(r.u8());
        if (std::string(magic, 4) != "MOED") throw io_error("bad magic, not a dataset file");
        const uint32_t version = r.u32();
        if (version != kDatasetVersion) throw io_error("unsupported dataset version " + std::to_string(version));
    } catch (const io_error& e) {
        throw io_error("dataset header: " + std::string(e.what()) + " (" + path + ")");
    }
    const uint32_t count = r.u32();
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        try {
            const size_t rec_start = r.pos;
            Scene s;
            const uint32_t ch = r.u32();
            const uint32_t h = r.u32();
            const uint32_t ww = r.u32();
            if (ch != 3 || h != ww || h == 0 || h > 4096) throw io_error("implausible image dims");
            s.size = static_cast<int>(h);
            s.image.resize(static_cast<size_t>(3) * h * ww);
            for (float& v : s.image) v = r.f32();
            const uint32_t nobj = r.u32();
            if (nobj > 1000) throw io_error("implausible object count");
            for (uint32_t o = 0; o < nobj; ++o) {
                GtObject g;
                g.box.x1 = r.f32();
                g.box.y1 = r.f32();
                g.box.x2 = r.f32();
                g.box.y2 = r.f32();
                g.class_id = static_cast<int>(r.u32());
                if (!(g.box.x2 > g.box.x1 && g.box.y2 > g.box.y1))
                    throw io_error("degenerate ground-truth box");
                s.objects.push_back(g);
            }
            const uint32_t want = crc32(bytes.data() + rec_start, r.pos - rec_start);
            const uint32_t got = r.u32();
            if (want != got) throw io_error("checksum mismatch");
            scenes.push_back(std::move(s));
        } catch (const io_error& e) {
            throw io_error("dataset record " + std::to_string(i) + ": " + e.what() + " (" + path + ")");
        }
    }
    return scenes;
}

}  // namespace moedet
