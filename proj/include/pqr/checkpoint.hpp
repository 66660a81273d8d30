#pragma once

// Checkpoint archive: a directory holding
//   manifest.json  names, shapes, dtype "f32", byte offsets, schedule
//                  constants, model config, and free-form metadata
//   weights.bin    little-endian float32 values, tensors concatenated in
//                  manifest order, each tensor row-major
// Backbones and adapter sets share the layout; "kind" tells them apart.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/adapters.hpp"
#include "pqr/model.hpp"

namespace pqr {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;

inline constexpr const char* manifest_file = "manifest.json";
inline constexpr const char* blob_file = "weights.bin";

struct ScheduleSpec {
    int num_train_steps = 1000;
    double beta_start = 8.5e-4;
    double beta_end = 1.2e-2;

    NoiseSchedule build() const { return NoiseSchedule::linear(num_train_steps, beta_start, beta_end); }
};

inline void to_json(nlohmann::json& j, const ScheduleSpec& s) {
    j = {{"type", "linear"}, {"num_train_steps", s.num_train_steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline void from_json(const nlohmann::json& j, ScheduleSpec& s) {
    require(j.value("type", std::string("linear")) == "linear", "schedule.type must be 'linear'");
    s.num_train_steps = j.at("num_train_steps").get<int>();
    s.beta_start = j.at("beta_start").get<double>();
    s.beta_end = j.at("beta_end").get<double>();
}

namespace detail {

inline void write_archive(const fs::path& dir, nlohmann::json manifest,
                          const std::vector<std::pair<std::string, const Mat*>>& tensors) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    nlohmann::json entries = nlohmann::json::array();
    std::vector<float> blob;
    for (const auto& [name, m] : tensors) {
        entries.push_back({{"name", name},
                           {"shape", {m->rows(), m->cols()}},
                           {"dtype", "f32"},
                           {"offset", blob.size() * sizeof(float)}});
        for (Eigen::Index r = 0; r < m->rows(); ++r)
            for (Eigen::Index c = 0; c < m->cols(); ++c) blob.push_back(static_cast<float>((*m)(r, c)));
    }
    manifest["tensors"] = std::move(entries);
    manifest["blob"] = blob_file;
    manifest["blob_bytes"] = blob.size() * sizeof(float);

    // Write to temporaries, then rename, so a reader never sees a half-written pair.
    const fs::path tmp_blob = dir / (std::string(blob_file) + ".tmp");
    const fs::path tmp_manifest = dir / (std::string(manifest_file) + ".tmp");
    {
        std::ofstream out(tmp_blob, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp_blob.string());
        out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
        if (!out) throw IoError("short write to " + tmp_blob.string());
    }
    {
        std::ofstream out(tmp_manifest);
        if (!out) throw IoError("cannot write " + tmp_manifest.string());
        out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp_blob, dir / blob_file);
    fs::rename(tmp_manifest, dir / manifest_file);
}

struct Archive {
    nlohmann::json manifest;
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat& at(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw InvalidArgument("checkpoint has no tensor '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const auto& [n, _] : tensors)
            if (n == name) return true;
        return false;
    }
};

inline Archive read_archive(const fs::path& dir) {
    const fs::path mpath = dir / manifest_file;
    std::ifstream min(mpath);
    if (!min) throw IoError("missing checkpoint manifest " + mpath.string());
    Archive a;
    try {
        a.manifest = nlohmann::json::parse(min);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
    }
    const fs::path bpath = dir / a.manifest.value("blob", std::string(blob_file));
    std::ifstream bin(bpath, std::ios::binary);
    if (!bin) throw IoError("missing checkpoint blob " + bpath.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    for (const auto& e : a.manifest.at("tensors")) {
        require(e.at("dtype").get<std::string>() == "f32", "checkpoint: unsupported dtype");
        const auto rows = e.at("shape")[0].get<Eigen::Index>();
        const auto cols = e.at("shape")[1].get<Eigen::Index>();
        const auto offset = e.at("offset").get<size_t>();
        const size_t n = static_cast<size_t>(rows * cols);
        if (offset + n * sizeof(float) > bytes.size()) throw IoError("checkpoint blob truncated at " + e.at("name").get<std::string>());
        std::vector<float> vals(n);
        std::memcpy(vals.data(), bytes.data() + offset, n * sizeof(float));
        Mat m(rows, cols);
        size_t k = 0;
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<double>(vals[k++]);
        a.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
    return a;
}

inline Mat round_to_f32(const Mat& m) {
    return m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

} // namespace detail

/// Stores a backbone. `metadata` is copied verbatim into the manifest.
inline void save_backbone(const fs::path& dir, const Backbone& model, const ScheduleSpec& schedule,
                          const nlohmann::json& metadata = nlohmann::json::object()) {
    Weights all = model.weights();
    model.vae().store(all);
    std::vector<std::pair<std::string, const Mat*>> tensors;
    for (const auto& [k, m] : all.tensors()) tensors.emplace_back(k, &m);
    nlohmann::json manifest = {{"format", "pqr-checkpoint"}, {"version", 1}, {"kind", "backbone"},
                               {"model_config", model.config()}, {"schedule", schedule}, {"metadata", metadata}};
    detail::write_archive(dir, std::move(manifest), tensors);
}

struct LoadedBackbone {
    Backbone model;
    ScheduleSpec schedule;
    nlohmann::json metadata;
};

inline LoadedBackbone load_backbone(const fs::path& dir) {
    auto a = detail::read_archive(dir);
    require(a.manifest.value("kind", std::string()) == "backbone", "checkpoint at " + dir.string() + " is not a backbone");
    ModelConfig cfg = a.manifest.at("model_config").get<ModelConfig>();
    ScheduleSpec sched = a.manifest.at("schedule").get<ScheduleSpec>();
    Weights w;
    for (auto& [name, m] : a.tensors) w.set(name, std::move(m));
    Autoencoder vae = Autoencoder::load(cfg, w);
    Weights denoiser;
    for (auto& [name, m] : w.tensors())
        if (name.rfind("vae.", 0) != 0) denoiser.set(name, m);
    return {Backbone(cfg, sched.build(), std::move(denoiser), std::move(vae)), sched,
            a.manifest.value("metadata", nlohmann::json::object())};
}

/// Rounds every tensor to float32 so that an in-memory model behaves exactly
/// like the same model after a save/load round trip.
inline Backbone quantize_like_checkpoint(const Backbone& model) {
    Weights w;
    for (const auto& [k, m] : model.weights().tensors()) w.set(k, detail::round_to_f32(m));
    Weights v;
    model.vae().store(v);
    for (auto& [k, m] : v.tensors()) m = detail::round_to_f32(m);
    Autoencoder vae = Autoencoder::load(model.config(), v);
    return Backbone(model.config(), model.schedule(), std::move(w), std::move(vae));
}

inline AdapterParams quantize_like_checkpoint(const AdapterParams& p) {
    AdapterParams q = p;
    if (q.token_vec) *q.token_vec = detail::round_to_f32(*q.token_vec);
    for (auto& [_, d] : q.low_rank) {
        d.a = detail::round_to_f32(d.a);
        d.b = detail::round_to_f32(d.b);
    }
    return q;
}

inline void save_adapters(const fs::path& dir, const AdapterParams& p,
                          const nlohmann::json& metadata = nlohmann::json::object()) {
    std::vector<std::pair<std::string, const Mat*>> tensors;
    if (p.token_vec) tensors.emplace_back("token_vec", &*p.token_vec);
    for (const auto& [name, d] : p.low_rank) {
        tensors.emplace_back("lora." + name + ".a", &d.a);
        tensors.emplace_back("lora." + name + ".b", &d.b);
    }
    nlohmann::json manifest = {{"format", "pqr-checkpoint"}, {"version", 1}, {"kind", "adapters"},
                               {"adapter_kind", to_string(p.kind)}, {"rank", p.rank}, {"metadata", metadata}};
    detail::write_archive(dir, std::move(manifest), tensors);
}

struct LoadedAdapters {
    AdapterParams params;
    nlohmann::json metadata;
};

inline LoadedAdapters load_adapters(const fs::path& dir) {
    auto a = detail::read_archive(dir);
    require(a.manifest.value("kind", std::string()) == "adapters", "checkpoint at " + dir.string() + " is not an adapter set");
    AdapterParams p;
    p.kind = adapter_kind_from_string(a.manifest.at("adapter_kind").get<std::string>());
    p.rank = a.manifest.value("rank", 0);
    for (auto& [name, m] : a.tensors) {
        if (name == "token_vec") {
            p.token_vec = m;
        } else if (name.rfind("lora.", 0) == 0) {
            const auto last = name.rfind('.');
            const std::string proj = name.substr(5, last - 5);
            const std::string part = name.substr(last + 1);
            require(part == "a" || part == "b", "checkpoint: bad low-rank tensor name '" + name + "'");
            (part == "a" ? p.low_rank[proj].a : p.low_rank[proj].b) = m;
        } else {
            throw InvalidArgument("checkpoint: unexpected adapter tensor '" + name + "'");
        }
    }
    return {std::move(p), a.manifest.value("metadata", nlohmann::json::object())};
}

} // namespace pqr
