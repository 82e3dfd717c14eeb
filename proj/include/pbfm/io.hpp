#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/data.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// On-disk envelope shared by datasets and checkpoints:
//   "PBFM" | format version (u32 LE) | header length (u64 LE) | JSON header | payload
// Dataset payload is little-endian f32, sample-major, then conditioning rows.
// Checkpoint payload is little-endian f64: parameters, EMA shadow, first and
// second optimizer moments, each block laid out per the header manifest.

namespace pbfm::io {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::uint32_t format_version = 1;

#ifndef PBFM_VERSION
#define PBFM_VERSION "unknown"
#endif

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "file format helpers assume a little-endian host");

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("file truncated");
    return v;
}

inline void write_envelope(std::ostream& os, const nlohmann::ordered_json& header) {
    os.write("PBFM", 4);
    write_pod<std::uint32_t>(os, format_version);
    const std::string h = header.dump();
    write_pod<std::uint64_t>(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
}

inline nlohmann::ordered_json read_envelope(std::istream& is, const std::string& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PBFM", 4) != 0)
        throw IoError(path + ": not a PBFM file (bad magic)");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != format_version)
        throw IoError(path + ": unsupported format version " + std::to_string(version));
    const auto hlen = read_pod<std::uint64_t>(is);
    std::string h(hlen, '\0');
    is.read(h.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError(path + ": truncated header");
    return nlohmann::ordered_json::parse(h);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// datasets

inline void write_dataset(const std::string& path, const data::GridDataset& ds) {
    ds.validate();
    nlohmann::ordered_json header;
    header["kind"] = "dataset";
    header["shape"] = {ds.count, ds.channel_count(), ds.h, ds.w};
    header["channels"] = ds.channels;
    header["cond_dim"] = ds.cond_dim;
    header["standardized"] = ds.standardized;
    header["normalization"] = {{"mean", ds.chan_mean},
                               {"std", ds.chan_std},
                               {"cond_mean", ds.cond_mean},
                               {"cond_std", ds.cond_std}};
    header["manifest"] = ds.manifest.is_null() ? nlohmann::ordered_json::object() : ds.manifest;
    header["code_version"] = PBFM_VERSION;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    detail::write_envelope(os, header);
    std::vector<float> buf(ds.samples.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(ds.samples[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (ds.cond_dim > 0) {
        std::vector<float> cbuf(ds.cond.size());
        for (std::size_t i = 0; i < cbuf.size(); ++i) cbuf[i] = static_cast<float>(ds.cond[i]);
        os.write(reinterpret_cast<const char*>(cbuf.data()),
                 static_cast<std::streamsize>(cbuf.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failed: " + path);
}

inline data::GridDataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    auto header = detail::read_envelope(is, path);
    if (header.value("kind", "") != "dataset") throw IoError(path + ": not a dataset file");

    data::GridDataset ds;
    auto shape = header.at("shape");
    ds.count = shape.at(0).get<std::int64_t>();
    ds.channels = header.at("channels").get<std::vector<std::string>>();
    ds.h = shape.at(2).get<std::int64_t>();
    ds.w = shape.at(3).get<std::int64_t>();
    ds.cond_dim = header.at("cond_dim").get<std::int64_t>();
    ds.standardized = header.value("standardized", false);
    const auto& norm = header.at("normalization");
    ds.chan_mean = norm.at("mean").get<std::vector<double>>();
    ds.chan_std = norm.at("std").get<std::vector<double>>();
    ds.cond_mean = norm.at("cond_mean").get<std::vector<double>>();
    ds.cond_std = norm.at("cond_std").get<std::vector<double>>();
    ds.manifest = header.value("manifest", nlohmann::ordered_json::object());

    const std::size_t n_samples = static_cast<std::size_t>(ds.count * ds.sample_stride());
    std::vector<float> buf(n_samples);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw IoError(path + ": truncated sample payload");
    ds.samples.assign(buf.begin(), buf.end());
    if (ds.cond_dim > 0) {
        std::vector<float> cbuf(static_cast<std::size_t>(ds.count * ds.cond_dim));
        is.read(reinterpret_cast<char*>(cbuf.data()),
                static_cast<std::streamsize>(cbuf.size() * sizeof(float)));
        if (!is) throw IoError(path + ": truncated conditioning payload");
        ds.cond.assign(cbuf.begin(), cbuf.end());
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
    std::int64_t step = 0;
    nlohmann::ordered_json config;  // full experiment snapshot
    std::vector<std::string> param_names;
    std::vector<ad::Shape> param_shapes;
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> ema;
    std::vector<std::vector<double>> opt_m;
    std::vector<std::vector<double>> opt_v;
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::ordered_json header;
    header["kind"] = "checkpoint";
    header["step"] = ck.step;
    header["config"] = ck.config;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
    std::int64_t offset = 0;
    for (std::size_t i = 0; i < ck.param_names.size(); ++i) {
        manifest.push_back({{"name", ck.param_names[i]},
                            {"shape", ck.param_shapes[i]},
                            {"offset", offset}});
        offset += ad::numel_of(ck.param_shapes[i]);
    }
    header["manifest"] = manifest;
    header["section_doubles"] = offset;
    header["code_version"] = PBFM_VERSION;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    detail::write_envelope(os, header);
    auto write_section = [&](const std::vector<std::vector<double>>& sec) {
        for (const auto& block : sec)
            os.write(reinterpret_cast<const char*>(block.data()),
                     static_cast<std::streamsize>(block.size() * sizeof(double)));
    };
    write_section(ck.params);
    write_section(ck.ema);
    write_section(ck.opt_m);
    write_section(ck.opt_v);
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    auto header = detail::read_envelope(is, path);
    if (header.value("kind", "") != "checkpoint") throw IoError(path + ": not a checkpoint file");

    Checkpoint ck;
    ck.step = header.at("step").get<std::int64_t>();
    ck.config = header.at("config");
    for (const auto& item : header.at("manifest")) {
        ck.param_names.push_back(item.at("name").get<std::string>());
        ck.param_shapes.push_back(item.at("shape").get<ad::Shape>());
    }
    auto read_section = [&](std::vector<std::vector<double>>& sec) {
        sec.resize(ck.param_shapes.size());
        for (std::size_t i = 0; i < sec.size(); ++i) {
            sec[i].resize(static_cast<std::size_t>(ad::numel_of(ck.param_shapes[i])));
            is.read(reinterpret_cast<char*>(sec[i].data()),
                    static_cast<std::streamsize>(sec[i].size() * sizeof(double)));
        }
        if (!is) throw IoError(path + ": truncated parameter payload");
    };
    read_section(ck.params);
    read_section(ck.ema);
    read_section(ck.opt_m);
    read_section(ck.opt_v);
    return ck;
}

}  // namespace pbfm::io
