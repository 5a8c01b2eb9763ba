#include "dv/io.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace dv::io {

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
    os.write("DVT1", 4);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
    // doubles are IEEE-754 little-endian on every supported target
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!os) throw std::runtime_error("save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DVT1", 4) != 0) {
        throw std::runtime_error("load_tensor: bad magic in " + path);
    }
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw std::runtime_error("load_tensor: implausible rank in " + path);
    Shape shape(rank);
    for (auto& e : shape) e = read_u32(is);
    Tensor t = Tensor::zeros(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("load_tensor: truncated file " + path);
    return t;
}

void save_checkpoint(const std::string& dir, const std::map<std::string, Tensor>& params) {
    fs::create_directories(dir);
    json manifest;
    for (const auto& [name, t] : params) {
        const std::string file = name + ".dvt";
        save_tensor((fs::path(dir) / file).string(), t);
        manifest[name] = {{"file", file}, {"shape", t.shape()}};
    }
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
    if (!os) throw std::runtime_error("save_checkpoint: write failed in " + dir);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("load_checkpoint: missing manifest in " + dir);
    json manifest = json::parse(is);
    std::map<std::string, Tensor> out;
    for (auto& [name, meta] : manifest.items()) {
        Tensor t = load_tensor((fs::path(dir) / meta.at("file").get<std::string>()).string());
        const Shape expect = meta.at("shape").get<Shape>();
        if (t.shape() != expect) {
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        }
        out.emplace(name, t);
    }
    return out;
}

}  // namespace dv::io
