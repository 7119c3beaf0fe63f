#include "moedet/checkpoint.hpp"

#include "moedet/serial.hpp"

namespace moedet {

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void write_param_set(ByteWriter& w, const ParameterSet<float>& ps) {
    w.u32(static_cast<uint32_t>(ps.size()));
    for (const auto& [name, t] : ps) {  // std::map: deterministic name order
        w.str(name);
        w.u32(static_cast<uint32_t>(t->rank()));
        for (int d : t->shape) w.u32(static_cast<uint32_t>(d));
        for (float v : t->data) w.f32(v);
    }
}

ParameterSet<float> read_param_set(ByteReader& r) {
    ParameterSet<float> ps;
    const uint32_t count = r.u32();
    if (count > 10000) throw io_error("implausible parameter count");
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        if (rank > 8) throw io_error("implausible tensor rank for " + name);
        std::vector<int> shape;
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32();
            if (dim == 0 || dim > 1u << 20) throw io_error("implausible dimension for " + name);
            shape.push_back(static_cast<int>(dim));
            n *= dim;
        }
        if (n > (1 << 26)) throw io_error("implausible tensor size for " + name);
        auto t = tensor_zeros<float>(std::move(shape), true);
        for (auto& v : t->data) v = r.f32();
        ps[name] = t;
    }
    return ps;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ByteWriter w;
    w.raw(reinterpret_cast<const uint8_t*>("MOEC"), 4);
    w.u32(kCheckpointVersion);
    w.u8(static_cast<uint8_t>(ckpt.kind));
    w.u32(static_cast<uint32_t>(ckpt.expert_config.hidden_channels));
    w.u32(static_cast<uint32_t>(ckpt.expert_config.num_bins));
    w.u32(static_cast<uint32_t>(ckpt.expert_config.num_classes));
    w.u32(static_cast<uint32_t>(ckpt.expert_config.image_size));
    w.u32(static_cast<uint32_t>(ckpt.router_config.num_experts));
    w.u32(static_cast<uint32_t>(ckpt.router_config.hidden_channels));
    w.u32(static_cast<uint32_t>(ckpt.router_config.router_channels));
    w.u32(ckpt.epoch);
    w.f64(ckpt.best_map);
    w.u64(ckpt.seed);
    w.u32(static_cast<uint32_t>(ckpt.experts.size()));
    for (const auto& ps : ckpt.experts) write_param_set(w, ps);
    write_param_set(w, ckpt.moe_params);
    w.u32(crc32(w.buf.data(), w.buf.size()));
    write_file(path, w.buf);
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file(path);
    try {
        if (bytes.size() < 8) throw io_error("file too short");
        const uint32_t stored = static_cast<uint32_t>(bytes[bytes.size() - 4]) |
                                static_cast<uint32_t>(bytes[bytes.size() - 3]) << 8 |
                                static_cast<uint32_t>(bytes[bytes.size() - 2]) << 16 |
                                static_cast<uint32_t>(bytes[bytes.size() - 1]) << 24;
        if (crc32(bytes.data(), bytes.size() - 4) != stored) throw io_error("checksum mismatch");

        ByteReader r(bytes.data(), bytes.size() - 4);
        char magic[4];
        for (char& m : magic) m = static_cast<char>(r.u8());
        if (std::string(magic, 4) != "MOEC") throw io_error("bad magic, not a checkpoint file");
        const uint32_t version = r.u32();
        if (version != kCheckpointVersion) throw io_error("unsupported checkpoint version " + std::to_string(version));

        Checkpoint c;
        const uint8_t kind = r.u8();
        if (kind > 1) throw io_error("unknown model kind");
        c.kind = static_cast<ModelKind>(kind);
        c.expert_config.hidden_channels = static_cast<int>(r.u32());
        c.expert_config.num_bins = static_cast<int>(r.u32());
        c.expert_config.num_classes = static_cast<int>(r.u32());
        c.expert_config.image_size = static_cast<int>(r.u32());
        c.router_config.num_experts = static_cast<int>(r.u32());
        c.router_config.hidden_channels = static_cast<int>(r.u32());
        c.router_config.router_channels = static_cast<int>(r.u32());
        c.epoch = r.u32();
        c.best_map = r.f64();
        c.seed = r.u64();
        const uint32_t num_experts = r.u32();
        if (num_experts > 64) throw io_error("implausible expert count");
        for (uint32_t e = 0; e < num_experts; ++e) c.experts.push_back(read_param_set(r));
        c.moe_params = read_param_set(r);
        if (!r.done()) throw io_error("trailing bytes after checkpoint payload");
        return c;
    } catch (const io_error& e) {
        throw io_error("checkpoint: " + std::string(e.what()) + " (" + path + ")");
    }
}

}  // namespace moedet
