#pragma once

// Versioned container of named arrays.
//
//   MLCSCKPT <version>\n
//   <header byte length>\n
//   <header JSON: meta object + array directory>\n
//   <array payloads, little-endian IEEE-754 doubles, in directory order>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mlcs/autodiff/tensor.hpp"

namespace mlcs::ad {

inline constexpr int kContainerVersion = 1;
inline constexpr const char* kContainerMagic = "MLCSCKPT";

class Container {
public:
    nlohmann::json meta = nlohmann::json::object();

    void put(const std::string& name, const Tensor& t) {
        if (auto it = index_.find(name); it != index_.end()) {
            arrays_[it->second].second = t.detach();
            return;
        }
        index_.emplace(name, arrays_.size());
        arrays_.emplace_back(name, t.detach());
    }

    void put_vector(const std::string& name, std::span<const double> values) {
        if (values.empty()) {
            // Zero-length arrays are stored with a sentinel shape.
            put(name + ".empty", Tensor::scalar(0.0));
            return;
        }
        put(name, Tensor({values.size()}, std::vector<double>(values.begin(), values.end())));
    }

    std::vector<double> get_vector(const std::string& name) const {
        if (has(name + ".empty")) return {};
        auto d = get(name).data();
        return {d.begin(), d.end()};
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        if (auto it = index_.find(name); it != index_.end()) return arrays_[it->second].second;
        throw FormatError("container has no array named '" + name + "'");
    }

    const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }

private:
    std::vector<std::pair<std::string, Tensor>> arrays_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline void save_container(const std::filesystem::path& path, const Container& c) {
    static_assert(std::endian::native == std::endian::little, "container payloads assume a little-endian host");
    nlohmann::json header;
    header["version"] = kContainerVersion;
    header["meta"] = c.meta;
    auto dir = nlohmann::json::array();
    for (auto& [name, t] : c.arrays()) dir.push_back({{"name", name}, {"shape", t.shape()}});
    header["arrays"] = dir;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PathError("cannot write " + path.string());
    out << kContainerMagic << ' ' << kContainerVersion << '\n' << text.size() << '\n' << text << '\n';
    for (auto& [name, t] : c.arrays())
        out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw PathError("failed writing " + path.string());
}

inline Container load_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PathError("cannot open " + path.string());
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != kContainerMagic) throw FormatError(path.string() + " is not a parameter container");
    if (version != kContainerVersion)
        throw FormatError(path.string() + ": unsupported container version " + std::to_string(version));
    std::size_t len = 0;
    in >> len;
    in.get();
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    in.get();
    if (!in) throw FormatError(path.string() + ": truncated header");
    auto header = nlohmann::json::parse(text);
    Container c;
    c.meta = header.at("meta");
    for (auto& entry : header.at("arrays")) {
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<double> data(numel(shape));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) throw FormatError(path.string() + ": truncated payload for " + entry.at("name").get<std::string>());
        c.put(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    return c;
}

}  // namespace mlcs::ad
