// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvad/core.hpp"
#include "mvad/model.hpp"

namespace mvad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Archive layout:
//   8 bytes   magic "MVADCKPT"
//   8 bytes   little-endian u64 header length
//   header    UTF-8 JSON: format_version "1", model_config, step, epoch,
//             extra, tensors [{name, shape [rows, cols], offset}]
//   payload   float64 little-endian values, offsets counted in elements

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'A', 'D', 'C', 'K', 'P', 'T'};
inline constexpr const char* kCheckpointFormatVersion = "1";

struct NamedTensor {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<double> values;
};

struct Checkpoint {
    ModelConfig config;
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    nlohmann::json extra = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

template <typename S>
void append_tensors(std::vector<NamedTensor>& out, const ModelParams<S>& p, const std::string& prefix = "") {
    p.for_each([&](const std::string& name, const Mat<S>& t) {
        NamedTensor nt{prefix + name, t.rows(), t.cols(), std::vector<double>(static_cast<std::size_t>(t.size()))};
        for (Eigen::Index i = 0; i < t.size(); ++i) nt.values[static_cast<std::size_t>(i)] = static_cast<double>(t.data()[i]);
        out.push_back(std::move(nt));
    });
}

/// Fills `p` (already shaped) from tensors named prefix + parameter name.
/// Reports every mismatch, first one leading.
template <typename S>
void assign_tensors(ModelParams<S>& p, const Checkpoint& ck, const std::string& prefix = "") {
    std::vector<std::string> problems;
    p.for_each([&](const std::string& name, Mat<S>& t) {
        const NamedTensor* src = ck.find(prefix + name);
        if (!src) {
            problems.push_back(prefix + name + ": missing");
            return;
        }
        if (src->rows != t.rows() || src->cols != t.cols()) {
            problems.push_back(prefix + name + ": expected shape [" + std::to_string(t.rows()) + ", " +
                               std::to_string(t.cols()) + "], found [" + std::to_string(src->rows) + ", " +
                               std::to_string(src->cols) + "]");
            return;
        }
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(src->values[static_cast<std::size_t>(i)]);
    });
    if (!problems.empty()) {
        std::string msg = "checkpoint tensor mismatch: " + problems.front();
        for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
        throw ConfigError(msg);
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["model_config"] = ck.config;
    header["step"] = ck.step;
    header["epoch"] = ck.epoch;
    header["extra"] = ck.extra;
    nlohmann::json index = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : ck.tensors) {
        index.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
        offset += t.values.size();
    }
    header["tensors"] = index;
    const std::string hdr = header.dump();

    // Sibling temp file, then rename.
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        const std::uint64_t len = hdr.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
        for (const auto& t : ck.tensors)
            out.write(reinterpret_cast<const char*>(t.values.data()),
                      static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw IoError(path.string() + " is not a checkpoint archive");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1ull << 32)) throw IoError("corrupt checkpoint header in " + path.string());
    std::string hdr(len, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hdr);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (header.value("format_version", std::string()) != kCheckpointFormatVersion)
        throw IoError("unsupported checkpoint format version in " + path.string());
    Checkpoint ck;
    ck.config = header.at("model_config").get<ModelConfig>();
    ck.step = header.at("step").get<std::int64_t>();
    ck.epoch = header.at("epoch").get<std::int64_t>();
    ck.extra = header.value("extra", nlohmann::json::object());
    const auto payload_start = in.tellg();
    for (const auto& e : header.at("tensors")) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        t.rows = e.at("shape").at(0).get<Eigen::Index>();
        t.cols = e.at("shape").at(1).get<Eigen::Index>();
        const auto offset = e.at("offset").get<std::uint64_t>();
        t.values.resize(static_cast<std::size_t>(t.rows * t.cols));
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
        in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        if (!in) throw IoError("truncated checkpoint payload in " + path.string() + " at tensor " + t.name);
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

template <typename S>
Checkpoint make_checkpoint(const ModelParams<S>& params, std::int64_t step = 0, std::int64_t epoch = 0) {
    Checkpoint ck;
    ck.config = params.config;
    ck.step = step;
    ck.epoch = epoch;
    append_tensors(ck.tensors, params);
    return ck;
}

/// Model parameters stored in `ck`, shaped by the checkpoint's own config.
template <typename S>
ModelParams<S> params_from_checkpoint(const Checkpoint& ck) {
    ModelParams<S> p = ModelParams<S>::zeros(ck.config);
    assign_tensors(p, ck);
    return p;
}

template <typename S>
void save_params(const std::filesystem::path& path, const ModelParams<S>& params) {
    save_checkpoint(path, make_checkpoint(params));
}

template <typename S>
ModelParams<S> load_params(const std::filesystem::path& path) {
    return params_from_checkpoint<S>(load_checkpoint(path));
}

/// Random init, optionally overwritten by a pretrained archive whose tensor
/// names and shapes must match `cfg`.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed, const std::optional<std::filesystem::path>& pretrained) {
    ModelParams<S> p = init_params<S>(cfg, seed);
    if (pretrained) assign_tensors(p, load_checkpoint(*pretrained));
    return p;
}

}  // namespace mvad
