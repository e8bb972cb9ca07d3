#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <voxcell/checks.hpp>
#include <voxcell/voxcell.hpp>

namespace fs = std::filesystem;
using namespace voxcell;
using nlohmann::json;
using Real = float;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument:
        case ErrorKind::NonPositiveAlpha:
        case ErrorKind::BatchTooSmall: return kUsage;
        case ErrorKind::NonFiniteLoss: return kNumeric;
        default: return kData;
    }
}

void emit_error(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
}

/// SHA-1 of "blob <size>\0<content>", the content address git assigns a file.
std::string git_blob_sha1(const std::vector<char>& content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, digest, &length);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < length; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

struct Globals {
    std::uint64_t seed = 0;
    int threads = 1;
    int grid = 30;
};

/// Records what a run consumed and how it was configured, next to its output.
class RunRecord {
public:
    RunRecord(std::string command, const Globals& g) : command_(std::move(command)) {
        config_ = json::object();
        config_["seed"] = g.seed;
        config_["threads"] = g.threads;
        config_["grid"] = g.grid;
    }

    void set(const std::string& key, json value) { config_[key] = std::move(value); }

    void input(const std::string& path) {
        inputs_.push_back({{"path", path}, {"git_blob_sha1", git_blob_sha1(io::read_file(path))}});
    }

    void output(const std::string& path) { outputs_.push_back(path); }

    void write(const std::string& path) const {
        const json j{{"command", command_}, {"config", config_}, {"inputs", inputs_}, {"outputs", outputs_}};
        io::atomic_write(path, j.dump(2) + "\n");
    }

private:
    std::string command_;
    json config_;
    json inputs_ = json::array();
    json outputs_ = json::array();
};

std::string read_text(const std::string& path) {
    const auto bytes = io::read_file(path);
    return {bytes.begin(), bytes.end()};
}

void write_text(const std::string& path, const std::string& text) { io::atomic_write(path, text); }

GridSpec grid_spec(int grid) {
    auto spec = GridSpec::with_pitch(grid);
    spec.validate();
    return spec;
}

std::string stem_of(const std::string& path) {
    std::string name = fs::path(path).filename().string();
    for (const char* suffix : {".density.vxg", ".species.vxg", ".vxg"})
        if (name.size() > std::string(suffix).size() && name.ends_with(suffix)) return name.substr(0, name.size() - std::string(suffix).size());
    return fs::path(path).stem().string();
}

fs::path resolve_entry(const std::string& manifest_path, const std::string& entry) {
    const fs::path p(entry);
    if (p.is_absolute() || fs::exists(p)) return p;
    return fs::path(manifest_path).parent_path() / p;
}

// ---------------------------------------------------------------------------
// Model bundles

std::string sidecar_path(const std::string& ckpt) { return ckpt + ".json"; }

struct Bundle {
    models::ModelConfig config;
    json meta;
    std::unique_ptr<models::VoxelVae<Real>> vae;
    std::unique_ptr<models::UNet<Real>> unet;

    tc::StateDict<Real> state() {
        auto s = vae->registry().state;
        const auto u = unet->registry().state;
        s.insert(s.end(), u.begin(), u.end());
        return s;
    }
};

Bundle make_bundle(const models::ModelConfig& cfg, std::uint64_t seed) {
    Bundle b;
    b.config = cfg;
    b.vae = std::make_unique<models::VoxelVae<Real>>(cfg, seed);
    std::mt19937_64 init(seed + 1);
    b.unet = std::make_unique<models::UNet<Real>>(cfg, init);
    return b;
}

Bundle load_bundle(const std::string& ckpt, RunRecord& record) {
    record.input(ckpt);
    record.input(sidecar_path(ckpt));
    json meta;
    try {
        meta = json::parse(read_text(sidecar_path(ckpt)));
    } catch (const json::exception& e) {
        fail(ErrorKind::MalformedFile, sidecar_path(ckpt) + ": " + e.what());
    }
    auto b = make_bundle(meta.at("model").get<models::ModelConfig>(), 0);
    b.meta = meta;
    tc::load_checkpoint(ckpt, b.state());
    return b;
}

void save_bundle(Bundle& b, const std::string& ckpt) {
    tc::save_checkpoint(ckpt, b.state());
    write_text(sidecar_path(ckpt), b.meta.dump(2) + "\n");
}

std::vector<DensityGrid> load_densities(const std::vector<std::string>& paths, const GridSpec& spec, RunRecord& record) {
    std::vector<DensityGrid> grids;
    for (const auto& p : paths) {
        record.input(p);
        auto g = load_density(p, spec.pitch());
        require(g.spec.side_voxels == spec.side_voxels, ErrorKind::ShapeMismatch,
                p + " has side " + std::to_string(g.spec.side_voxels) + ", expected " + std::to_string(spec.side_voxels));
        grids.push_back(std::move(g));
    }
    return grids;
}

std::vector<const DensityGrid*> pointers(const std::vector<DensityGrid>& grids) {
    std::vector<const DensityGrid*> out;
    for (const auto& g : grids) out.push_back(&g);
    return out;
}

std::vector<models::TrainingSample> samples_from_manifest(const std::string& path, Split split, const GridSpec& spec,
                                                          RunRecord& record) {
    record.input(path);
    DatasetManifest manifest;
    try {
        manifest = manifest_from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        fail(ErrorKind::MalformedFile, path + ": " + e.what());
    }
    std::vector<models::TrainingSample> out;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        const auto file = resolve_entry(path, e.path).string();
        record.input(file);
        const auto cell = to_unit_cell(load_crystal_file(file));
        for (auto seed : e.seeds) {
            auto s = make_sample(cell, manifest.representation, seed, spec);
            out.push_back({std::move(s.density), std::move(s.species)});
        }
    }
    if (out.empty()) fail(ErrorKind::EmptyDataset, "manifest has no entries in the requested split");
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct ManifestArgs {
    std::vector<std::string> inputs;
    std::string out;
    std::string rep = "single";
    double train_fraction = 0.8;
    int rotations = 3;
    int offsets = 2;
    double max_side = 10.0;
};

int run_manifest(const ManifestArgs& a, const Globals& g) {
    RunRecord record("manifest", g);
    std::vector<std::string> files;
    for (const auto& in : a.inputs) {
        if (fs::is_directory(in)) {
            for (const auto& e : fs::directory_iterator(in))
                if (e.path().extension() == ".cif") files.push_back(e.path().string());
        } else {
            files.push_back(in);
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<CrystalFile> crystals;
    const fs::path base = fs::absolute(a.out).parent_path();
    for (const auto& f : files) {
        record.input(f);
        auto c = load_crystal_file(f);
        c.path = fs::relative(fs::absolute(f), base).string();
        crystals.push_back(std::move(c));
    }
    const auto m = build_manifest(crystals, a.train_fraction, g.seed,
                                  {.representation = parse_representation(a.rep),
                                   .rotations_per_cell = a.rotations,
                                   .offsets_per_cell = a.offsets,
                                   .max_side_angstrom = a.max_side});
    write_text(a.out, manifest_to_json(m).dump(2) + "\n");
    record.set("representation", a.rep);
    record.set("train_fraction", a.train_fraction);
    record.output(a.out);
    record.write(a.out + ".run.json");
    std::cout << json{{"entries", m.entries.size()}, {"out", a.out}}.dump() << '\n';
    return kOk;
}

struct VoxelizeArgs {
    std::string manifest;
    std::string rep;
    std::string out;
};

int run_voxelize(const VoxelizeArgs& a, const Globals& g) {
    RunRecord record("voxelize", g);
    record.input(a.manifest);
    DatasetManifest manifest;
    try {
        manifest = manifest_from_json(json::parse(read_text(a.manifest)));
    } catch (const json::exception& e) {
        fail(ErrorKind::MalformedFile, a.manifest + ": " + e.what());
    }
    const auto rep = a.rep.empty() ? manifest.representation : parse_representation(a.rep);
    const auto spec = grid_spec(g.grid);
    json index = json::array();

    struct Job {
        std::string file, stem, split;
        std::uint32_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& e : manifest.entries) {
        const auto file = resolve_entry(a.manifest, e.path).string();
        record.input(file);
        for (auto seed : e.seeds)
            jobs.push_back({file, fs::path(file).stem().string() + "_" + std::to_string(seed),
                            e.split == Split::Train ? "train" : "test", seed});
    }
    std::vector<std::string> errors(jobs.size());
#pragma omp parallel for schedule(dynamic) num_threads(g.threads)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(jobs.size()); ++i) {
        const auto& j = jobs[static_cast<std::size_t>(i)];
        try {
            const auto s = make_sample(to_unit_cell(load_crystal_file(j.file)), rep, j.seed, spec);
            const auto dir = fs::path(a.out) / j.split;
            save_density((dir / (j.stem + ".density.vxg")).string(), s.density);
            save_species((dir / (j.stem + ".species.vxg")).string(), s.species);
            SegmentedAtoms truth;
            for (const auto& atom : atoms_inside_box(s.atoms, spec)) truth.push_back({atom.atomic_number, atom.cart, 0});
            write_text((dir / (j.stem + ".atoms.txt")).string(), atoms_to_text(truth));
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    }
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (!errors[i].empty()) fail(ErrorKind::MalformedFile, jobs[i].file + ": " + errors[i]);
        const auto dir = fs::path(a.out) / jobs[i].split;
        index.push_back({{"source", jobs[i].file},
                         {"seed", jobs[i].seed},
                         {"split", jobs[i].split},
                         {"density", (dir / (jobs[i].stem + ".density.vxg")).string()},
                         {"species", (dir / (jobs[i].stem + ".species.vxg")).string()},
                         {"atoms", (dir / (jobs[i].stem + ".atoms.txt")).string()}});
        record.output((dir / jobs[i].stem).string());
    }
    write_text((fs::path(a.out) / "index.json").string(), json{{"representation", std::string(to_string(rep))},
                                                               {"grid", g.grid},
                                                               {"samples", index}}
                                                              .dump(2) + "\n");
    record.set("representation", std::string(to_string(rep)));
    record.write((fs::path(a.out) / "run.json").string());
    std::cout << json{{"samples", jobs.size()}, {"out", a.out}}.dump() << '\n';
    return kOk;
}

struct TrainArgs {
    std::string manifest;
    std::string ckpt_out;
    std::string log;
    std::string init;
    double beta = 1e-3;
    bool beta_div10 = false;
    double gamma = 0.1;
    double lr = 1e-5;
    int batch = 24;
    long steps = 1000;
    int latent = 300;
    bool toy = false;
    bool conditioned = false;
    bool no_attention = false;
    std::string seg_loss = "bce";
};

int run_train(const TrainArgs& a, const Globals& g) {
    RunRecord record("train", g);
    const auto spec = grid_spec(g.grid);
    const auto data = samples_from_manifest(a.manifest, Split::Train, spec, record);

    models::TrainConfig tcfg;
    tcfg.beta = a.beta_div10 ? a.beta / 10 : a.beta;
    tcfg.gamma = a.gamma;
    tcfg.lr = a.lr;
    tcfg.batch = a.batch;
    tcfg.seed = g.seed;
    require(a.seg_loss == "bce" || a.seg_loss == "softmax", ErrorKind::InvalidArgument, "--seg-loss must be bce or softmax");
    tcfg.seg_loss = a.seg_loss == "bce" ? models::SegmentationLoss::SigmoidBce : models::SegmentationLoss::SoftmaxCrossEntropy;
    tcfg.validate();

    Bundle b;
    if (!a.init.empty()) {
        b = load_bundle(a.init, record);
    } else {
        auto cfg = a.toy ? models::ModelConfig::toy(g.grid, a.latent) : models::ModelConfig{};
        cfg.grid_side = g.grid;
        cfg.latent_dim = a.latent;
        cfg.conditioned = a.conditioned;
        cfg.attention = !a.no_attention;
        if (!a.toy) cfg.decoder_start_side = std::max(1, (g.grid * 5 + 29) / 30);
        cfg.validate();
        b = make_bundle(cfg, g.seed);
    }

    std::ofstream log;
    if (!a.log.empty()) {
        if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
        log.open(a.log, std::ios::trunc);
        if (!log) fail(ErrorKind::Io, "cannot write " + a.log);
    }
    const auto history = models::train_joint(*b.vae, *b.unet, std::span<const models::TrainingSample>(data), tcfg, a.steps,
                                             [&](const models::StepMetrics& m) {
                                                 const auto line = models::to_json_record(m).dump();
                                                 if (log) log << line << '\n';
                                                 else std::cout << line << '\n';
                                                 return true;
                                             });

    b.meta = {{"model", b.config},
              {"train", tcfg},
              {"steps", a.steps},
              {"grid", g.grid},
              {"dataset_max_density", models::dataset_max_density(std::span<const models::TrainingSample>(data))},
              {"manifest", a.manifest}};
    save_bundle(b, a.ckpt_out);
    record.set("train", tcfg);
    record.set("model", b.config);
    record.set("steps", a.steps);
    record.output(a.ckpt_out);
    record.output(sidecar_path(a.ckpt_out));
    record.write(a.ckpt_out + ".run.json");
    if (!history.empty())
        std::cerr << json{{"final", models::to_json_record(history.back())}, {"ckpt", a.ckpt_out}}.dump() << '\n';
    return kOk;
}

int check_grid(const Bundle& b, const Globals& g) {
    require(b.config.grid_side == g.grid, ErrorKind::ShapeMismatch,
            "checkpoint was trained on a " + std::to_string(b.config.grid_side) + "^3 grid; pass --grid " +
                std::to_string(b.config.grid_side));
    return 0;
}

struct ReconstructArgs {
    std::string ckpt;
    std::vector<std::string> inputs;
    std::string out;
};

int run_reconstruct(const ReconstructArgs& a, const Globals& g) {
    RunRecord record("reconstruct", g);
    auto b = load_bundle(a.ckpt, record);
    check_grid(b, g);
    const auto spec = grid_spec(g.grid);
    const auto grids = load_densities(a.inputs, spec, record);
    const auto ptrs = pointers(grids);
    const auto z = models::encode(*b.vae, std::span<const DensityGrid* const>(ptrs));
    const auto recon = models::decode(*b.vae, std::span<const models::LatentVector>(z), spec);
    for (std::size_t i = 0; i < recon.size(); ++i) {
        const auto path = (fs::path(a.out) / (stem_of(a.inputs[i]) + ".recon.vxg")).string();
        save_density(path, recon[i]);
        record.output(path);
    }
    record.write((fs::path(a.out) / "run.json").string());
    return kOk;
}

struct SegmentArgs {
    std::string ckpt;
    std::vector<std::string> inputs;
    std::string out;
    int min_cluster = 2;
    bool density_weighted = false;
    bool as_json = false;
};

int run_segment(const SegmentArgs& a, const Globals& g) {
    RunRecord record("segment", g);
    const auto spec = grid_spec(g.grid);
    const SegmentOptions opt{.min_cluster_voxels = a.min_cluster, .density_weighted = a.density_weighted};
    std::vector<SegmentedAtoms> results;
    if (a.ckpt.empty()) {
        require(!a.density_weighted, ErrorKind::InvalidArgument, "density-weighted centroids need density inputs and --ckpt");
        for (const auto& p : a.inputs) {
            record.input(p);
            results.push_back(segment(one_hot_species(load_species(p, spec.pitch())), opt));
        }
    } else {
        auto b = load_bundle(a.ckpt, record);
        check_grid(b, g);
        const auto grids = load_densities(a.inputs, spec, record);
        const auto ptrs = pointers(grids);
        const auto probs = models::segment_logits(*b.unet, std::span<const DensityGrid* const>(ptrs));
        for (std::size_t i = 0; i < probs.size(); ++i) results.push_back(segment(probs[i], opt, &grids[i]));
    }
    const auto render = [&](const SegmentedAtoms& atoms) {
        return a.as_json ? atoms_to_json(atoms).dump(2) + "\n" : atoms_to_text(atoms);
    };
    const std::string ext = a.as_json ? ".atoms.json" : ".atoms.txt";
    if (a.inputs.size() == 1 && !fs::is_directory(a.out) && !a.out.ends_with("/")) {
        write_text(a.out, render(results[0]));
        record.output(a.out);
        record.write(a.out + ".run.json");
    } else {
        for (std::size_t i = 0; i < results.size(); ++i) {
            const auto path = (fs::path(a.out) / (stem_of(a.inputs[i]) + ext)).string();
            write_text(path, render(results[i]));
            record.output(path);
        }
        record.write((fs::path(a.out) / "run.json").string());
    }
    return kOk;
}

struct EvaluateArgs {
    std::vector<std::string> pred;
    std::vector<std::string> truth;
    std::string out;
    std::string csv;
    double match_radius = 0.5;
};

int run_evaluate(const EvaluateArgs& a, const Globals& g) {
    RunRecord record("evaluate", g);
    require(a.pred.size() == a.truth.size(), ErrorKind::InvalidArgument, "--pred and --truth need the same number of files");
    EvalReport report;
    report.match_radius = a.match_radius;
    for (std::size_t i = 0; i < a.pred.size(); ++i) {
        record.input(a.pred[i]);
        record.input(a.truth[i]);
        const auto pred = to_placed(atoms_from_text(read_text(a.pred[i])));
        const auto truth = to_placed(atoms_from_text(read_text(a.truth[i])));
        report.samples.push_back(evaluate_sample(stem_of(a.pred[i]), pred, truth, a.match_radius));
    }
    const auto text = to_json(report).dump(2) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        write_text(a.out, text);
        record.output(a.out);
    }
    if (!a.csv.empty())
        for (const auto& [name, body] : to_csv_tables(report)) {
            const auto path = (fs::path(a.csv) / name).string();
            write_text(path, body);
            record.output(path);
        }
    if (!a.out.empty()) record.write(a.out + ".run.json");
    else if (!a.csv.empty()) record.write((fs::path(a.csv) / "run.json").string());
    return kOk;
}

struct InterpolateArgs {
    std::string ckpt;
    std::string a;
    std::string b;
    int frames = 10;
    std::string out;
};

int run_interpolate(const InterpolateArgs& a, const Globals& g) {
    RunRecord record("interpolate", g);
    require(a.frames >= 2, ErrorKind::InvalidArgument, "--frames must be >= 2");
    auto b = load_bundle(a.ckpt, record);
    check_grid(b, g);
    const auto spec = grid_spec(g.grid);
    const auto grids = load_densities({a.a, a.b}, spec, record);
    const auto ptrs = pointers(grids);
    const auto z = models::encode(*b.vae, std::span<const DensityGrid* const>(ptrs));
    for (int f = 0; f < a.frames; ++f) {
        const double t = static_cast<double>(f) / (a.frames - 1);
        const auto zt = models::latent_interpolate(z[0], z[1], t);
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03d.vxg", f);
        const auto path = (fs::path(a.out) / name).string();
        save_density(path, models::decode(*b.vae, std::span<const models::LatentVector>(&zt, 1), spec)[0]);
        record.output(path);
    }
    record.set("frames", a.frames);
    record.write((fs::path(a.out) / "run.json").string());
    return kOk;
}

struct SampleArgs {
    std::string ckpt;
    int n = 1;
    double alpha = 0;
    std::string out;
};

int run_sample(const SampleArgs& a, const Globals& g) {
    RunRecord record("sample", g);
    require(a.n >= 1, ErrorKind::InvalidArgument, "--n must be >= 1");
    auto b = load_bundle(a.ckpt, record);
    check_grid(b, g);
    const auto spec = grid_spec(g.grid);
    const bool conditioned = a.alpha != 0;
    if (conditioned) {
        if (a.alpha <= 0) fail(ErrorKind::NonPositiveAlpha, "--alpha must be positive");
        require(b.config.conditioned, ErrorKind::InvalidArgument, "--alpha needs a checkpoint trained with --conditioned");
    }
    std::mt19937_64 rng(g.seed);
    std::vector<models::LatentVector> zs;
    for (int i = 0; i < a.n; ++i) {
        auto z = models::sample_prior(rng, static_cast<std::size_t>(b.config.latent_dim));
        zs.push_back(conditioned ? models::condition_scale(z, a.alpha) : z);
    }
    const auto grids = models::decode(*b.vae, std::span<const models::LatentVector>(zs), spec);
    for (int i = 0; i < a.n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d.vxg", i);
        const auto path = (fs::path(a.out) / name).string();
        save_density(path, grids[static_cast<std::size_t>(i)]);
        record.output(path);
    }
    record.set("n", a.n);
    if (conditioned) record.set("alpha", a.alpha);
    record.write((fs::path(a.out) / "run.json").string());
    return kOk;
}

struct DiscriminatorArgs {
    std::string ckpt;
    std::string disc_ckpt;
    std::string manifest;
    std::vector<std::string> inputs;
    long steps = 200;
    int batch = 8;
    double lr = 1e-3;
    std::string out;
};

int run_train_discriminator(const DiscriminatorArgs& a, const Globals& g) {
    RunRecord record("train-discriminator", g);
    auto b = load_bundle(a.ckpt, record);
    check_grid(b, g);
    const auto spec = grid_spec(g.grid);
    const auto data = samples_from_manifest(a.manifest, Split::Train, spec, record);
    std::vector<const DensityGrid*> ptrs;
    for (const auto& s : data) ptrs.push_back(&s.density);
    const auto real = models::encode(*b.vae, std::span<const DensityGrid* const>(ptrs));
    models::Discriminator<Real> disc(b.config, g.seed);
    const auto losses = models::train_discriminator(disc, *b.vae, std::span<const models::LatentVector>(real), spec,
                                                    {.steps = a.steps, .batch = a.batch, .lr = a.lr, .seed = g.seed});
    tc::save_checkpoint(a.disc_ckpt, disc.registry().state);
    write_text(sidecar_path(a.disc_ckpt), json{{"model", b.config}, {"steps", a.steps}, {"vae", a.ckpt}}.dump(2) + "\n");
    record.set("steps", a.steps);
    record.output(a.disc_ckpt);
    record.write(a.disc_ckpt + ".run.json");
    std::cout << json{{"final_loss", losses.empty() ? 0.0 : losses.back()}, {"disc_ckpt", a.disc_ckpt}}.dump() << '\n';
    return kOk;
}

int run_discriminate(const DiscriminatorArgs& a, const Globals& g) {
    RunRecord record("discriminate", g);
    auto b = load_bundle(a.ckpt, record);
    check_grid(b, g);
    const auto spec = grid_spec(g.grid);
    models::Discriminator<Real> disc(b.config, 0);
    record.input(a.disc_ckpt);
    tc::load_checkpoint(a.disc_ckpt, disc.registry().state);
    disc.trained = true;
    const auto grids = load_densities(a.inputs, spec, record);
    const auto ptrs = pointers(grids);
    const auto scores = models::discriminator_scores(disc, std::span<const DensityGrid* const>(ptrs));
    json out = json::array();
    for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({{"input", a.inputs[i]}, {"score", scores[i]}});
    const auto text = json{{"scores", out}}.dump(2) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        write_text(a.out, text);
        record.output(a.out);
        record.write(a.out + ".run.json");
    }
    return kOk;
}

json result_json(const checks::CheckResult& r) {
    return {{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}};
}

int report_checks(const std::vector<checks::CheckResult>& results, const std::string& out, RunRecord& record) {
    json all = json::array();
    bool ok = true;
    for (const auto& r : results) {
        std::cout << result_json(r).dump() << '\n';
        all.push_back(result_json(r));
        ok = ok && r.passed;
    }
    if (!out.empty()) {
        write_text(out, json{{"results", all}, {"passed", ok}}.dump(2) + "\n");
        record.output(out);
        record.write(out + ".run.json");
    }
    return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crystal unit cell voxel VAE toolkit"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--grid", g.grid, "Voxels per box side at 1/3 A pitch")->check(CLI::Range(4, 256));

    ManifestArgs manifest;
    auto* c_manifest = app.add_subcommand("manifest", "Split crystal files into a dataset manifest");
    c_manifest->add_option("inputs", manifest.inputs, "Crystal files or directories")->required();
    c_manifest->add_option("--out", manifest.out, "Manifest path")->required();
    c_manifest->add_option("--rep", manifest.rep)->check(CLI::IsMember({"single", "repeated"}));
    c_manifest->add_option("--train-fraction", manifest.train_fraction);
    c_manifest->add_option("--rotations", manifest.rotations);
    c_manifest->add_option("--offsets", manifest.offsets);
    c_manifest->add_option("--max-side", manifest.max_side);

    VoxelizeArgs vox;
    auto* c_vox = app.add_subcommand("voxelize", "Write density and species grids for every manifest entry");
    c_vox->add_option("manifest", vox.manifest)->required()->check(CLI::ExistingFile);
    c_vox->add_option("--rep", vox.rep)->check(CLI::IsMember({"single", "repeated"}));
    c_vox->add_option("--out", vox.out)->required();

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Joint VAE and U-Net training");
    c_train->add_option("--manifest", train.manifest)->required()->check(CLI::ExistingFile);
    c_train->add_option("--ckpt-out", train.ckpt_out)->required();
    c_train->add_option("--init", train.init, "Resume from a checkpoint")->check(CLI::ExistingFile);
    c_train->add_option("--log", train.log, "Metrics log (one JSON record per step); stdout when omitted");
    c_train->add_option("--beta", train.beta);
    c_train->add_flag("--beta-div10", train.beta_div10, "Divide beta by 10");
    c_train->add_option("--gamma", train.gamma);
    c_train->add_option("--lr", train.lr);
    c_train->add_option("--batch", train.batch);
    c_train->add_option("--steps", train.steps);
    c_train->add_option("--latent", train.latent);
    c_train->add_flag("--toy", train.toy, "Narrow channels for desk-scale runs");
    c_train->add_flag("--conditioned", train.conditioned);
    c_train->add_flag("--no-attention", train.no_attention);
    c_train->add_option("--seg-loss", train.seg_loss)->check(CLI::IsMember({"bce", "softmax"}));

    ReconstructArgs recon;
    auto* c_recon = app.add_subcommand("reconstruct", "Encode and decode density grids");
    c_recon->add_option("--ckpt", recon.ckpt)->required()->check(CLI::ExistingFile);
    c_recon->add_option("--in", recon.inputs)->required()->check(CLI::ExistingFile);
    c_recon->add_option("--out", recon.out)->required();

    SegmentArgs seg;
    auto* c_seg = app.add_subcommand("segment", "Turn grids into atoms (species grids without --ckpt)");
    c_seg->add_option("--ckpt", seg.ckpt)->check(CLI::ExistingFile);
    c_seg->add_option("--in", seg.inputs)->required()->check(CLI::ExistingFile);
    c_seg->add_option("--out", seg.out)->required();
    c_seg->add_option("--min-cluster", seg.min_cluster);
    c_seg->add_flag("--density-weighted", seg.density_weighted);
    c_seg->add_flag("--json", seg.as_json);

    EvaluateArgs eval;
    auto* c_eval = app.add_subcommand("evaluate", "Compare predicted and true atom lists");
    c_eval->add_option("--pred", eval.pred)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--truth", eval.truth)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--out", eval.out, "Report JSON; stdout when omitted");
    c_eval->add_option("--csv", eval.csv, "Directory for plot-ready CSV tables");
    c_eval->add_option("--match-radius", eval.match_radius);

    InterpolateArgs interp;
    auto* c_interp = app.add_subcommand("interpolate", "Decode a straight latent path between two grids");
    c_interp->add_option("--ckpt", interp.ckpt)->required()->check(CLI::ExistingFile);
    c_interp->add_option("--a", interp.a)->required()->check(CLI::ExistingFile);
    c_interp->add_option("--b", interp.b)->required()->check(CLI::ExistingFile);
    c_interp->add_option("--frames", interp.frames);
    c_interp->add_option("--out", interp.out)->required();

    SampleArgs sample;
    auto* c_sample = app.add_subcommand("sample", "Decode prior draws");
    c_sample->add_option("--ckpt", sample.ckpt)->required()->check(CLI::ExistingFile);
    c_sample->add_option("--n", sample.n);
    c_sample->add_option("--alpha", sample.alpha, "Target peak density fraction (conditioned models)");
    c_sample->add_option("--out", sample.out)->required();

    DiscriminatorArgs disc;
    auto* c_tdisc = app.add_subcommand("train-discriminator", "Train the latent-mixture discriminator");
    c_tdisc->add_option("--ckpt", disc.ckpt)->required()->check(CLI::ExistingFile);
    c_tdisc->add_option("--manifest", disc.manifest)->required()->check(CLI::ExistingFile);
    c_tdisc->add_option("--disc-ckpt", disc.disc_ckpt)->required();
    c_tdisc->add_option("--steps", disc.steps);
    c_tdisc->add_option("--batch", disc.batch);
    c_tdisc->add_option("--lr", disc.lr);

    DiscriminatorArgs score;
    auto* c_disc = app.add_subcommand("discriminate", "Score density grids");
    c_disc->add_option("--ckpt", score.ckpt)->required()->check(CLI::ExistingFile);
    c_disc->add_option("--disc-ckpt", score.disc_ckpt)->required()->check(CLI::ExistingFile);
    c_disc->add_option("--in", score.inputs)->required()->check(CLI::ExistingFile);
    c_disc->add_option("--out", score.out, "Scores JSON; stdout when omitted");

    int shapes = 20;
    bool no_end_to_end = false;
    std::string check_out;
    auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference checks for every differentiable op");
    c_grad->add_option("--shapes", shapes);
    c_grad->add_flag("--no-end-to-end", no_end_to_end);
    c_grad->add_option("--out", check_out);

    bool quick = false;
    auto* c_self = app.add_subcommand("selftest", "Run the oracle suites of every module");
    c_self->add_flag("--quick", quick);
    c_self->add_option("--out", check_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        emit_error("Usage", e.what(), kUsage);
        return kUsage;
    }

#ifdef _OPENMP
    omp_set_num_threads(g.threads);
#endif

    try {
        if (*c_manifest) return run_manifest(manifest, g);
        if (*c_vox) return run_voxelize(vox, g);
        if (*c_train) return run_train(train, g);
        if (*c_recon) return run_reconstruct(recon, g);
        if (*c_seg) return run_segment(seg, g);
        if (*c_eval) return run_evaluate(eval, g);
        if (*c_interp) return run_interpolate(interp, g);
        if (*c_sample) return run_sample(sample, g);
        if (*c_tdisc) return run_train_discriminator(disc, g);
        if (*c_disc) return run_discriminate(score, g);
        if (*c_grad) {
            RunRecord record("gradcheck", g);
            record.set("shapes", shapes);
            return report_checks(checks::gradcheck_suite({.shapes_per_op = shapes, .seed = g.seed ? g.seed : 404,
                                                          .end_to_end = !no_end_to_end}),
                                 check_out, record);
        }
        if (*c_self) {
            RunRecord record("selftest", g);
            record.set("quick", quick);
            return report_checks(checks::selftest(quick), check_out, record);
        }
    } catch (const Error& e) {
        const int code = exit_code_for(e.kind());
        emit_error(std::string(to_string(e.kind())), e.what(), code);
        return code;
    } catch (const std::filesystem::filesystem_error& e) {
        emit_error("Io", e.what(), kData);
        return kData;
    } catch (const std::exception& e) {
        emit_error("Internal", e.what(), kData);
        return kData;
    }
    return kUsage;
}
