#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pqr/pqr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pqr;

namespace {

enum ExitCode { ok = 0, failure = 1, missing_checkpoint = 2, config_error = 3, refinement_aborted = 4 };

struct MissingCheckpoint : IoError {
    std::string field;
    MissingCheckpoint(std::string f, const std::string& what) : IoError(what), field(std::move(f)) {}
};

struct Aborted : Error {
    explicit Aborted(const std::string& what) : Error(ErrorCode::empty_mask, what) {}
};

std::string utc_stamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

void write_text(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + p.string());
        out << text;
        if (!out) throw IoError("short write to " + p.string());
    }
    fs::rename(tmp, p);
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("--config", "cannot open " + p.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("--config", "malformed JSON in " + p.string());
    if (!j.is_object()) throw ConfigError("--config", "top level must be an object");
    return j;
}

class Run {
public:
    Run(std::string command, json config, const std::string& explicit_dir) : command_(std::move(command)), config_(std::move(config)) {
        fs::path root = "runs";
        if (config_.contains("output_root") && config_["output_root"].is_string()) root = config_["output_root"].get<std::string>();
        if (const char* env = std::getenv("PQR_OUTPUT_ROOT"); env && *env) root = env;
        if (!explicit_dir.empty()) {
            dir_ = explicit_dir;
        } else {
            const std::string base = command_ + "-" + utc_stamp();
            dir_ = root / base;
            for (int i = 1; fs::exists(dir_); ++i) dir_ = root / (base + "-" + std::to_string(i));
        }
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
        log_.open(dir_ / "log.txt");
    }

    const fs::path& dir() const { return dir_; }
    const json& config() const { return config_; }
    Section section(const std::string& key) const {
        static const json empty = json::object();
        if (!config_.contains(key) || config_[key].is_null()) return Section(empty, key);
        return Section(config_[key], key);
    }

    void log(const std::string& line) {
        std::lock_guard<std::mutex> lock(mu_);
        std::cerr << "[" << command_ << "] " << line << "\n";
        if (log_) log_ << line << "\n" << std::flush;
    }

    void snapshot(const json& resolved) {
        json snap = config_;
        snap["command"] = command_;
        snap["resolved"] = resolved;
        write_json(dir_ / "config.json", snap);
    }

private:
    std::string command_;
    json config_;
    fs::path dir_;
    std::ofstream log_;
    std::mutex mu_;
};

fs::path checkpoint_path(const Section& s, const std::string& key) {
    const auto p = fs::path(s.required<std::string>(key));
    if (!fs::exists(p / manifest_file)) throw MissingCheckpoint(s.path_of(key), "checkpoint not found: " + p.string());
    return p;
}

LoadedBackbone load_model(const Run& run) { return load_backbone(checkpoint_path(run.section("backbone"), "checkpoint")); }

int jobs_from(int cli_jobs) {
    int jobs = cli_jobs;
    if (jobs <= 0)
        if (const char* env = std::getenv("PQR_THREADS"); env && *env) jobs = std::atoi(env);
    return std::max(1, jobs);
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads; results are written by index.
template <class F>
void parallel_for(int n, int jobs, F&& f) {
    if (jobs <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min(jobs, n); ++t)
        pool.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!error) error = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------- commands

int cmd_make_corpus(Run& run) {
    const Section s = run.section("corpus");
    const auto cfg = corpus_config_from(s);
    const fs::path root = s.has("root") ? fs::path(s.required<std::string>("root")) : run.dir() / "corpus";
    run.snapshot({{"corpus", to_json_value(cfg)}, {"corpus_root", root.string()}});
    const auto d = corpus::make_corpus(cfg, root);
    run.log("wrote " + std::to_string(d.rows.size()) + " images to " + root.string());
    write_json(run.dir() / "report.json", {{"corpus_root", root.string()}, {"rows", d.rows.size()}, {"concepts", d.concepts.size()}});
    return ok;
}

std::vector<TrainingExample> training_examples(const corpus::Dataset& d) {
    std::vector<TrainingExample> ex;
    for (const auto& r : d.rows) ex.push_back({d.load_image(r), Prompt::parse(corpus::describe(r.caption, r.attributes))});
    return ex;
}

int cmd_train_backbone(Run& run) {
    const Section cs = run.section("corpus");
    const fs::path root = cs.required<std::string>("root");
    const Section bs = run.section("backbone");
    const auto cfg = backbone_train_config_from(bs.sub("train"));
    const fs::path out = bs.has("checkpoint") ? fs::path(bs.required<std::string>("checkpoint")) : run.dir() / "backbone";
    run.snapshot({{"backbone", {{"train", to_json_value(cfg)}, {"checkpoint", out.string()}}}, {"corpus_root", root.string()}});
    const auto d = corpus::load_corpus(root);
    const auto ex = training_examples(d);
    run.log("training on " + std::to_string(ex.size()) + " examples for " + std::to_string(cfg.steps) + " steps");
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train_backbone(ex, cfg);
    const double secs = detail::seconds_since(t0);
    save_backbone(out, result.model, cfg.schedule,
                  {{"corpus_root", root.string()}, {"train", to_json_value(cfg)}, {"vae_round_trip_mse", result.vae_round_trip_mse}});
    auto window_mean = [&](size_t from, size_t to) {
        double s = 0;
        for (size_t i = from; i < to; ++i) s += result.curve[i];
        return s / double(to - from);
    };
    const size_t n = result.curve.size(), w = std::min<size_t>(50, n);
    run.log("checkpoint written to " + out.string());
    write_json(run.dir() / "report.json", {{"checkpoint", out.string()},
                                           {"parameter_count", result.model.weights().parameter_count()},
                                           {"vae_round_trip_mse", result.vae_round_trip_mse},
                                           {"loss_first", window_mean(0, w)},
                                           {"loss_last", window_mean(n - w, n)},
                                           {"timings", {{"train_seconds", secs}}}});
    return ok;
}

struct PersonalizeSettings {
    std::vector<std::string> concepts;
    int references_per_concept = 3;
    std::string prompt_template = "a photo of [V] {shape}";
    AdapterKind kind = AdapterKind::composite;
    TrainConfig train;
    fs::path output_dir;
};

int cmd_personalize(Run& run, int jobs) {
    auto loaded = load_model(run);
    const Backbone& model = loaded.model;
    const Section cs = run.section("corpus");
    const auto d = corpus::load_corpus(cs.required<std::string>("root"));
    const Section s = run.section("personalize");
    PersonalizeSettings p;
    std::vector<std::string> all_ids;
    for (const auto& c : d.concepts) all_ids.push_back(c.id);
    p.concepts = s.get("concepts", all_ids);
    for (const auto& id : p.concepts) s.check(!d.rows_for(id).empty(), "concepts", "unknown concept '" + id + "'");
    p.references_per_concept = s.get("references_per_concept", p.references_per_concept);
    s.check(p.references_per_concept >= 1, "references_per_concept", "must be >= 1");
    p.prompt_template = s.get("reference_prompt_template", p.prompt_template);
    s.check(p.prompt_template.find(corpus::concept_placeholder) != std::string::npos, "reference_prompt_template",
            "must contain the [V] slot");
    try {
        p.kind = adapter_kind_from_string(s.get<std::string>("kind", to_string(p.kind)));
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of("kind"), e.what());
    }
    p.train = train_config_from(s.sub("train"));
    p.output_dir = s.has("output_dir") ? fs::path(s.required<std::string>("output_dir")) : run.dir() / "adapters";
    run.snapshot({{"personalize",
                   {{"concepts", p.concepts},
                    {"references_per_concept", p.references_per_concept},
                    {"reference_prompt_template", p.prompt_template},
                    {"kind", to_string(p.kind)},
                    {"train", to_json_value(p.train)},
                    {"output_dir", p.output_dir.string()}}}});

    std::vector<json> rows(p.concepts.size());
    parallel_for(static_cast<int>(p.concepts.size()), jobs, [&](int i) {
        const std::string& id = p.concepts[static_cast<size_t>(i)];
        const auto concept_rows = d.rows_for(id);
        std::vector<Image> refs;
        json ref_paths = json::array();
        for (int k = 0; k < std::min<int>(p.references_per_concept, static_cast<int>(concept_rows.size())); ++k) {
            refs.push_back(d.load_image(*concept_rows[static_cast<size_t>(k)]));
            ref_paths.push_back(fs::absolute(d.root / concept_rows[static_cast<size_t>(k)]->path).string());
        }
        const std::string prompt_text = corpus::personalize(corpus::fill_template(p.prompt_template, concept_rows.front()->attributes));
        const Prompt ref_prompt = Prompt::parse(prompt_text);
        auto result = personalize_base(model, refs, ref_prompt, p.kind, p.train);
        const size_t n = result.curve.size(), w = std::min<size_t>(10, n);
        double first = 0, last = 0;
        for (size_t k = 0; k < w; ++k) {
            first += result.curve[k] / double(w);
            last += result.curve[n - 1 - k] / double(w);
        }
        save_adapters(p.output_dir / id, result.adapters,
                      {{"concept_id", id}, {"reference_prompt", prompt_text}, {"references", ref_paths},
                       {"train", to_json_value(p.train)}});
        rows[static_cast<size_t>(i)] = {{"concept_id", id}, {"reference_prompt", prompt_text}, {"loss_first10", first}, {"loss_last10", last}};
        run.log("personalized " + id + " (" + prompt_text + ")");
    });
    write_json(run.dir() / "report.json", {{"output_dir", p.output_dir.string()}, {"concepts", rows}});
    return ok;
}

struct QueryInputs {
    AdapterParams adapters;
    Image reference;
    Prompt reference_prompt;
    std::string reference_path;
};

QueryInputs query_inputs(const Section& s) {
    const fs::path ap = checkpoint_path(s, "adapters");
    auto la = load_adapters(ap);
    QueryInputs q;
    q.adapters = std::move(la.params);
    q.reference_path = s.get<std::string>("reference", "");
    if (q.reference_path.empty()) {
        if (!la.metadata.contains("references") || la.metadata["references"].empty())
            throw ConfigError(s.path_of("reference"), "required field is missing and the adapters record no references");
        q.reference_path = la.metadata["references"][0].get<std::string>();
    }
    if (!fs::exists(q.reference_path)) throw ConfigError(s.path_of("reference"), "file not found: " + q.reference_path);
    q.reference = read_png(q.reference_path);
    std::string rp = s.get<std::string>("reference_prompt", la.metadata.value("reference_prompt", std::string()));
    if (rp.empty()) throw ConfigError(s.path_of("reference_prompt"), "required field is missing");
    try {
        q.reference_prompt = Prompt::parse(rp);
        q.reference_prompt.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of("reference_prompt"), e.what());
    }
    if (!q.reference_prompt.concept_index) throw ConfigError(s.path_of("reference_prompt"), "must contain the concept token <v>");
    return q;
}

void check_against_model(const Backbone& model, const RefineConfig& cfg, const Section& s) {
    try {
        model.schedule().check_t(cfg.extraction.t);
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of("extraction.t"), e.what());
    }
    try {
        model.schedule().check_t(cfg.matching.descriptor_t);
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of("matching.descriptor_t"), e.what());
    }
}

json matches_json(const RefineResult& r) {
    json j = to_json_value(r.matches);
    j["mask_area"] = r.mask.mask.data.size() ? r.mask.area() : 0;
    j["mask_degenerate"] = r.mask.degenerate;
    return j;
}

int cmd_refine(Run& run) {
    auto loaded = load_model(run);
    const Backbone& model = loaded.model;
    const Section s = run.section("refine");
    const RefineConfig cfg = refine_config_from(s);
    check_against_model(model, cfg, s);
    const QueryInputs q = query_inputs(s);
    run.snapshot({{"refine", to_json_value(cfg)},
                  {"reference", q.reference_path},
                  {"reference_prompt", q.reference_prompt.text()},
                  {"backbone", run.section("backbone").required<std::string>("checkpoint")}});

    const RefineResult r = refine_query(model, q.adapters, q.reference, q.reference_prompt, cfg);
    write_png(run.dir() / "before.png", r.image_before);
    write_png(run.dir() / "after.png", r.image_after);
    json report = to_json_value(r);
    report["prompt"] = cfg.prompt.text();
    report["seed"] = cfg.seed;
    write_json(run.dir() / "report.json", report);
    write_json(run.dir() / "matches.json", matches_json(r));
    save_adapters(run.dir() / "adapters", r.adapters_after,
                  {{"prompt", cfg.prompt.text()}, {"seed", cfg.seed}, {"reference_prompt", q.reference_prompt.text()},
                   {"references", {q.reference_path}}, {"refined", !r.aborted}});
    if (r.aborted) throw Aborted("refinement aborted: " + r.abort_reason);
    run.log("combined loss " + std::to_string(r.report.combined) + " -> " + std::to_string(r.report_after.combined));
    return ok;
}

int cmd_generate(Run& run) {
    auto loaded = load_model(run);
    const Backbone& model = loaded.model;
    const Section s = run.section("generate");
    const Prompt prompt = prompt_field(s, "prompt");
    std::optional<AdapterParams> adapters;
    if (s.has("adapters")) adapters = load_adapters(checkpoint_path(s, "adapters")).params;
    s.check(adapters || !prompt.concept_index, "adapters", "a prompt with <v> needs adapters");
    const SamplerConfig sc = sampler_from(s.sub("sampler"));
    const auto seeds = s.get("seeds", std::vector<uint64_t>{s.get<uint64_t>("seed", 0)});
    run.snapshot({{"generate", {{"prompt", prompt.text()}, {"seeds", seeds}, {"sampler", to_json_value(sc)},
                                {"adapters", s.get<std::string>("adapters", "")}}}});
    json images = json::array();
    for (uint64_t seed : seeds) {
        SamplerConfig c = sc;
        c.seed = seed;
        const Image img = model.decode(sample(model, prompt, c, adapters ? &*adapters : nullptr));
        const std::string name = "sample_" + std::to_string(seed) + ".png";
        write_png(run.dir() / name, img);
        images.push_back(name);
    }
    write_json(run.dir() / "report.json", {{"prompt", prompt.text()}, {"images", images}});
    return ok;
}

int cmd_eval(Run& run, bool paired_flag, int jobs) {
    auto loaded = load_model(run);
    const Backbone& model = loaded.model;
    const Section s = run.section("eval");
    const fs::path adapters_dir = s.required<std::string>("adapters_dir");
    s.check(fs::is_directory(adapters_dir), "adapters_dir", "not a directory: " + adapters_dir.string());
    std::vector<std::string> concepts = s.get("concepts", std::vector<std::string>{});
    if (concepts.empty()) {
        for (const auto& e : fs::directory_iterator(adapters_dir))
            if (fs::exists(e.path() / manifest_file)) concepts.push_back(e.path().filename().string());
        std::sort(concepts.begin(), concepts.end());
    }
    s.check(!concepts.empty(), "adapters_dir", "contains no adapter checkpoints");
    const int per_concept = s.get("queries_per_concept", 4);
    s.check(per_concept >= 1, "queries_per_concept", "must be >= 1");
    const std::string tmpl = s.get<std::string>("prompt_template", "a photo of [V] {shape} on {background} background");
    s.check(tmpl.find(corpus::concept_placeholder) != std::string::npos, "prompt_template", "must contain the [V] slot");
    const uint64_t seed0 = s.get<uint64_t>("seed", 0);
    const bool paired = paired_flag || s.get("paired", false);
    const bool save_images = s.get("save_images", false);

    // Per-query refinement settings come from the refine section; prompt and seed are per query.
    json refine_raw = run.config().value("refine", json::object());
    refine_raw["prompt"] = "<v>";
    const RefineConfig base_cfg = refine_config_from(Section(refine_raw, "refine"));
    check_against_model(model, base_cfg, Section(refine_raw, "refine"));

    struct Query {
        SuiteQuery q;
        AdapterParams adapters;
        Prompt reference_prompt;
    };
    std::vector<Query> queries;
    for (const auto& id : concepts) {
        auto la = load_adapters(checkpoint_path(Section(json{{"adapters", (adapters_dir / id).string()}}, "eval"), "adapters"));
        const auto& meta = la.metadata;
        if (!meta.contains("references") || !meta.contains("reference_prompt"))
            throw ConfigError(s.path_of("adapters_dir"), "adapters for " + id + " lack reference metadata");
        std::vector<Image> refs;
        for (const auto& p : meta["references"]) refs.push_back(read_png(p.get<std::string>()));
        const Prompt ref_prompt = Prompt::parse(meta["reference_prompt"].get<std::string>());
        // The shape noun follows the concept token in the reference prompt.
        corpus::Attributes attrs;
        attrs.shape = class_word_of(ref_prompt);
        for (int k = 0; k < per_concept; ++k) {
            attrs.background = words::backgrounds[static_cast<size_t>(k) % words::backgrounds.size()];
            Query q;
            q.q.id = id + "_q" + std::to_string(k);
            q.q.prompt = Prompt::parse(corpus::personalize(corpus::fill_template(tmpl, attrs)));
            q.q.seed = seed0 + queries.size();
            q.q.references = refs;
            q.adapters = la.params;
            q.reference_prompt = ref_prompt;
            queries.push_back(std::move(q));
        }
    }
    run.snapshot({{"eval", {{"adapters_dir", adapters_dir.string()}, {"concepts", concepts}, {"queries_per_concept", per_concept},
                            {"prompt_template", tmpl}, {"seed", seed0}, {"paired", paired}}},
                  {"refine", to_json_value(base_cfg)}});

    const HistogramMomentEmbedder image_e;
    const AttributeEmbedder text_e;
    const int n = static_cast<int>(queries.size());
    std::vector<Image> without(static_cast<size_t>(n)), with(static_cast<size_t>(n));
    std::vector<json> extra(static_cast<size_t>(n));
    parallel_for(n, jobs, [&](int i) {
        auto& q = queries[static_cast<size_t>(i)];
        RefineConfig cfg = base_cfg;
        cfg.prompt = q.q.prompt;
        cfg.seed = q.q.seed;
        if (paired) {
            const RefineResult r = refine_query(model, q.adapters, q.q.references.front(), q.reference_prompt, cfg);
            without[static_cast<size_t>(i)] = r.image_before;
            with[static_cast<size_t>(i)] = r.image_after;
            extra[static_cast<size_t>(i)] = {{"query", q.q.id}, {"prompt", q.q.prompt.text()}, {"seed", q.q.seed},
                                             {"aborted", r.aborted}, {"combined_before", r.report.combined},
                                             {"combined_after", r.report_after.combined}};
        } else {
            without[static_cast<size_t>(i)] = model.decode(sample(model, q.q.prompt, cfg.sampler_config(), &q.adapters));
            extra[static_cast<size_t>(i)] = {{"query", q.q.id}, {"prompt", q.q.prompt.text()}, {"seed", q.q.seed}};
        }
        if (save_images) {
            write_png(run.dir() / (q.q.id + "_without.png"), without[static_cast<size_t>(i)]);
            if (paired) write_png(run.dir() / (q.q.id + "_with.png"), with[static_cast<size_t>(i)]);
        }
    });
    std::vector<SuiteQuery> suite;
    for (const auto& q : queries) suite.push_back(q.q);
    json report;
    if (paired) {
        const PairedReport pr = evaluate_paired(suite, without, with, image_e, text_e);
        report = to_json_value(pr);
        write_text(run.dir() / "report.csv", to_csv(pr));
    } else {
        const AlignmentReport ar = alignment_report(suite, without, image_e, text_e);
        report = to_json_value(ar);
        std::string csv = "query,image_alignment,text_alignment\n";
        for (const auto& row : ar.rows) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%.17g,%.17g", row.image_alignment, row.text_alignment);
            csv += row.query_id + "," + buf + "\n";
        }
        write_text(run.dir() / "report.csv", csv);
    }
    report["queries"] = extra;
    write_json(run.dir() / "report.json", report);
    run.log("evaluated " + std::to_string(n) + " queries");
    return ok;
}

int cmd_match_debug(Run& run) {
    auto loaded = load_model(run);
    const Backbone& model = loaded.model;
    const Section s = run.section("refine");
    const RefineConfig cfg = refine_config_from(s);
    check_against_model(model, cfg, s);
    const QueryInputs q = query_inputs(s);
    run.snapshot({{"refine", to_json_value(cfg)}, {"reference", q.reference_path}, {"reference_prompt", q.reference_prompt.text()}});

    std::vector<Latent> traj;
    const RefineObjective obj = prepare_objective(model, q.adapters, q.reference, q.reference_prompt, cfg, traj);
    const FeatureStep& step = obj.steps().front();
    write_json(run.dir() / "matches.json", to_json_value(step.matches));

    const int scale = 4;
    const Rgb8 ref = upscale(to_rgb8(q.reference), scale);
    const Rgb8 gen = upscale(to_rgb8(model.decode(traj.front())), scale);
    Rgb8 pair = side_by_side(ref, gen);
    const double sy = double(ref.h) / step.matches.h, sx = double(ref.w) / step.matches.w;
    for (size_t i = 0; i < step.matches.pairs.size(); i += std::max<size_t>(1, step.matches.pairs.size() / 48)) {
        const auto& [a, b] = step.matches.pairs[i];
        draw_line(pair, int((a.row + 0.5) * sy), int((a.col + 0.5) * sx), int((b.row + 0.5) * sy), ref.w + int((b.col + 0.5) * sx),
                  255, 255, 0);
    }
    write_png(run.dir() / "matches.png", pair);
    write_png(run.dir() / "mask.png", heatmap(step.mask.mask.data, step.mask.mask.h, step.mask.mask.w, 16));
    for (const auto& [id, m] : step.m_ref.per_layer) write_png(run.dir() / ("ca_ref_" + id + ".png"), heatmap(m.data, m.h, m.w, 128 / m.h));
    const auto gen_maps = extract(model, step.z_gen, cfg.prompt, &q.adapters, step.extraction).second;
    for (const auto& [id, m] : gen_maps.per_layer) write_png(run.dir() / ("ca_gen_" + id + ".png"), heatmap(m.data, m.h, m.w, 128 / m.h));
    write_json(run.dir() / "report.json", {{"num_matches", step.matches.size()}, {"mask_area", step.mask.area()},
                                           {"mask_degenerate", step.mask.degenerate}});
    return ok;
}

json error_json(const std::string& code, const std::string& message, const std::string& field = "") {
    json j = {{"error", code}, {"message", message}};
    if (!field.empty()) j["field"] = field;
    return j;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Per-query personalization refinement on a desk-scale diffusion backbone"};
    app.require_subcommand(1);
    std::string config_path, run_dir;
    std::vector<std::string> overrides;
    int jobs = 0;
    bool paired = false;
    const std::vector<std::string> names = {"make-corpus", "train-backbone", "personalize", "refine", "generate", "eval", "match-debug"};
    std::vector<CLI::App*> subs;
    for (const auto& n : names) {
        auto* sub = app.add_subcommand(n);
        sub->add_option("-c,--config", config_path, "JSON config file");
        sub->add_option("-s,--set", overrides, "Override a config field: dotted.path=value")->take_all();
        sub->add_option("--run-dir", run_dir, "Write into this directory instead of a timestamped one");
        sub->add_option("-j,--jobs", jobs, "Maximum worker threads (default: PQR_THREADS or 1)");
        if (n == "eval") sub->add_flag("--paired", paired, "Refine every query and report both arms");
        subs.push_back(sub);
    }
    CLI11_PARSE(app, argc, argv);
    std::string command;
    for (auto* sub : subs)
        if (sub->parsed()) command = sub->get_name();

    std::unique_ptr<Run> run;
    auto fail = [&](int code, const json& err) {
        std::cerr << err.dump() << "\n";
        if (run) {
            try {
                write_json(run->dir() / "error.json", err);
            } catch (...) {
            }
        }
        return code;
    };
    try {
        json config = config_path.empty() ? json::object() : read_json_file(config_path);
        for (const auto& o : overrides) apply_override(config, o);
        config.erase("resolved");
        config.erase("command");
        run = std::make_unique<Run>(command, config, run_dir);
        const int j = jobs_from(jobs);
        if (command == "make-corpus") return cmd_make_corpus(*run);
        if (command == "train-backbone") return cmd_train_backbone(*run);
        if (command == "personalize") return cmd_personalize(*run, j);
        if (command == "refine") return cmd_refine(*run);
        if (command == "generate") return cmd_generate(*run);
        if (command == "eval") return cmd_eval(*run, paired, j);
        if (command == "match-debug") return cmd_match_debug(*run);
        return fail(failure, error_json("invalid_argument", "unknown command " + command));
    } catch (const MissingCheckpoint& e) {
        return fail(missing_checkpoint, error_json("missing_checkpoint", e.what(), e.field));
    } catch (const ConfigError& e) {
        return fail(config_error, error_json("config", e.what(), e.path()));
    } catch (const Aborted& e) {
        return fail(refinement_aborted, error_json("empty_mask", e.what()));
    } catch (const Error& e) {
        return fail(failure, error_json(to_string(e.code()), e.what()));
    } catch (const std::exception& e) {
        return fail(failure, error_json("internal", e.what()));
    }
}
