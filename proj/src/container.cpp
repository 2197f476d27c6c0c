#include "neglab/container.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "neglab/errors.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

const Tensor& TensorFile::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw DataError("missing tensor: " + name);
    }
    return it->second;
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open tensor file: " + path);
    }
    uint64_t header_len = 0;
    unsigned char lenbuf[8];
    if (!in.read(reinterpret_cast<char*>(lenbuf), 8)) {
        throw DataError("malformed header: file shorter than 8 bytes: " + path);
    }
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenbuf[i];
    if (header_len == 0 || header_len > (1ull << 30)) {
        throw DataError("malformed header: implausible header length in " + path);
    }

    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
        throw DataError("malformed header: truncated JSON header in " + path);
    }
    ordered_json header;
    try {
        header = ordered_json::parse(header_text);
    } catch (const std::exception& e) {
        throw DataError("malformed header: " + std::string(e.what()));
    }

    const std::streampos data_start = in.tellg();
    TensorFile out;
    for (auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            for (auto& [k, v] : info.items()) {
                out.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        const std::string dtype = info.at("dtype").get<std::string>();
        if (dtype != "F32") {
            throw DataError("tensor " + name + " has unsupported dtype " + dtype);
        }
        std::vector<size_t> shape = info.at("shape").get<std::vector<size_t>>();
        const auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0]) {
            throw DataError("tensor " + name + " has malformed data_offsets");
        }
        Tensor t(shape);
        const uint64_t bytes = offsets[1] - offsets[0];
        if (bytes != t.numel() * sizeof(float)) {
            throw DataError("tensor " + name + " byte length does not match shape " +
                            t.shape_str());
        }
        in.seekg(data_start + static_cast<std::streamoff>(offsets[0]));
        if (!in.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(bytes))) {
            throw DataError("tensor " + name + " payload truncated in " + path);
        }
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

void save_tensor_file(const std::string& path, const TensorFile& file) {
    ordered_json header = ordered_json::object();
    if (!file.metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : file.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }
    uint64_t offset = 0;
    for (const auto& [name, t] : file.tensors) {
        const uint64_t bytes = t.numel() * sizeof(float);
        header[name] = {{"dtype", "F32"},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    const std::string header_text = header.dump();

    std::ofstream outf(path, std::ios::binary | std::ios::trunc);
    if (!outf) {
        throw DataError("cannot write tensor file: " + path);
    }
    const uint64_t header_len = header_text.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xFF);
    outf.write(reinterpret_cast<const char*>(lenbuf), 8);
    outf.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : file.tensors) {
        outf.write(reinterpret_cast<const char*>(t.data.data()),
                   static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!outf) {
        throw DataError("short write while saving tensor file: " + path);
    }
}

}  // namespace neglab
