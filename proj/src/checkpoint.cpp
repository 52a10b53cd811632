#include "flowmimic/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "flowmimic/hash.hpp"
#include "json.hpp"

namespace flowmimic::nn {

namespace {

void put_le64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_le64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace

void save_tensors(const std::string& prefix,
                  const std::vector<std::pair<std::string, const Tensor*>>& items) {
    std::string blob;
    nlohmann::json manifest;
    manifest["format"] = "flowmimic-ckpt-1";
    nlohmann::json entries = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& [name, t] : items) {
        entries.push_back({{"name", name},
                           {"rows", t->rows},
                           {"cols", t->cols},
                           {"offset", offset},
                           {"count", t->size()}});
        for (double d : t->data) put_le64(blob, std::bit_cast<uint64_t>(d));
        offset += t->size();
    }
    manifest["entries"] = entries;
    manifest["blob_fnv"] = hash_hex(fnv1a64(blob.data(), blob.size()));

    std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw CheckpointError("cannot write " + prefix + ".bin");
    bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    bin.close();
    if (!bin) throw CheckpointError("short write to " + prefix + ".bin");

    std::ofstream js(prefix + ".json", std::ios::trunc);
    if (!js) throw CheckpointError("cannot write " + prefix + ".json");
    js << manifest.dump(2) << "\n";
}

std::map<std::string, Tensor> load_tensors(const std::string& prefix) {
    std::ifstream js(prefix + ".json");
    if (!js) throw CheckpointError("cannot open " + prefix + ".json");
    nlohmann::json manifest;
    try {
        js >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("bad manifest " + prefix + ".json: " + e.what());
    }
    if (manifest.value("format", "") != "flowmimic-ckpt-1")
        throw CheckpointError("unknown checkpoint format in " + prefix + ".json");

    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw CheckpointError("cannot open " + prefix + ".bin");
    std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (manifest.value("blob_fnv", "") != hash_hex(fnv1a64(blob.data(), blob.size())))
        throw CheckpointError("blob hash mismatch for " + prefix);

    std::map<std::string, Tensor> out;
    for (const auto& e : manifest.at("entries")) {
        const std::string name = e.at("name").get<std::string>();
        Tensor t(e.at("rows").get<int>(), e.at("cols").get<int>());
        const size_t offset = e.at("offset").get<size_t>();
        const size_t count = e.at("count").get<size_t>();
        if (count != t.size() || (offset + count) * 8 > blob.size())
            throw CheckpointError("manifest entry out of range: " + name);
        const unsigned char* p =
            reinterpret_cast<const unsigned char*>(blob.data()) + offset * 8;
        for (size_t i = 0; i < count; ++i)
            t.data[i] = std::bit_cast<double>(get_le64(p + i * 8));
        out.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace flowmimic::nn
