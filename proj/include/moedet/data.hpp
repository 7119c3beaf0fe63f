#pragma once

// Deterministic two-domain synthetic detection data. Scenes render colored
// geometric shapes on contrasting backgrounds: domain A is a few large
// objects on bright ground, domain B is many small objects on dark, cluttered
// ground. Every draw comes from a stream keyed by (seed, index, domain), so a
// scene is a pure function of those three.

#include <cstdint>
#include <string>
#include <vector>

#include "moedet/geometry.hpp"

namespace moedet {

inline constexpr int kNumClasses = 4;

const char* class_name(int class_id);  // disc, square, triangle, cross

struct GtObject {
    Box box;
    int class_id = 0;
};

struct Scene {
    int size = 0;              // square image, 3 channels
    std::vector<float> image;  // CHW, 3 * size * size, values in [0,1]
    std::vector<GtObject> objects;

    float& px(int ch, int r, int c) { return image[static_cast<size_t>((ch * size + r) * size + c)]; }
    float px(int ch, int r, int c) const { return image[static_cast<size_t>((ch * size + r) * size + c)]; }
};

struct DomainSpec {
    char name = 'A';
    int image_size = 64;
    int min_objects = 1, max_objects = 2;
    int size_lo = 14, size_hi = 30;  // object max-side range, pixels
    double bg_lo = 0.75, bg_hi = 0.95;
    double noise_sigma = 0.02;
    int clutter_lo = 0, clutter_hi = 0;
    bool bright_objects = false;
};

DomainSpec domain_spec(char name);  // 'A' or 'B'

Scene generate_scene(const DomainSpec& domain, uint64_t seed, int index);
std::vector<Scene> generate_scenes(const DomainSpec& domain, uint64_t seed, int count, int index_offset = 0);

// Binary dataset files: magic "MOED", version, record count, then one
// CRC-guarded record per scene. Round-trips are bit-exact.
void write_dataset(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> read_dataset(const std::string& path);

}  // namespace moedet
