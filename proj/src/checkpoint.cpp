#include "cal3/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cal3/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace cal3 {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'L', '3'};

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& in, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
    ordered_json header;
    header["phase"] = phase;
    header["step"] = step;
    header["config"] = config.to_json();
    header["vocab"] = vocab_words;
    ordered_json dir = ordered_json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        dir.push_back(entry);
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    }
    header["tensors"] = dir;
    std::string header_str = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + header_str.size() + offset);
    out.insert(out.end(), kMagic, kMagic + 4);
    append_u32(out, kVersion);
    append_u32(out, static_cast<std::uint32_t>(header_str.size()));
    out.insert(out.end(), header_str.begin(), header_str.end());
    for (const auto& [name, t] : tensors) {
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data().data());
        out.insert(out.end(), bytes, bytes + t.data().size() * sizeof(float));
    }
    return out;
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw LoadError("checkpoint: bad magic, not a CAL3 file");
    std::uint32_t version = read_u32(bytes, 4);
    if (version != kVersion)
        throw LoadError("checkpoint: unsupported format version " + std::to_string(version));
    std::uint32_t header_len = read_u32(bytes, 8);
    if (bytes.size() < 12 + static_cast<std::size_t>(header_len))
        throw LoadError("checkpoint: truncated header");

    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    } catch (const std::exception& e) {
        throw LoadError(std::string("checkpoint: header parse failure: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.phase = header.at("phase").get<std::string>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.config = TrainConfig::from_json(header.at("config"));
    ckpt.vocab_words = header.at("vocab").get<std::vector<std::string>>();

    const std::size_t payload_start = 12 + header_len;
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        auto shape = entry.at("shape").get<std::vector<int>>();
        std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        std::size_t count = static_cast<std::size_t>(shape_numel(shape));
        std::size_t begin = payload_start + static_cast<std::size_t>(offset);
        if (begin + count * sizeof(float) > bytes.size())
            throw LoadError("checkpoint: tensor '" + name + "' payload out of range");
        std::vector<float> data(count);
        std::memcpy(data.data(), bytes.data() + begin, count * sizeof(float));
        ckpt.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    return ckpt;
}

void Checkpoint::save(const std::string& path) const {
    auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("checkpoint: write failure on '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("checkpoint: read failure on '" + path + "'");
    return from_bytes(bytes);
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

}  // namespace cal3
