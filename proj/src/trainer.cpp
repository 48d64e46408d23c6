#include "avflow/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace avflow {

const char* schedule_name(ForcingSchedule s) {
    switch (s) {
        case ForcingSchedule::SyncOnly: return "SyncOnly";
        case ForcingSchedule::IndepOnly: return "IndepOnly";
        case ForcingSchedule::ProgForcing: return "ProgForcing";
    }
    return "?";
}

ForcingSchedule parse_schedule(const std::string& name) {
    if (name == "SyncOnly") return ForcingSchedule::SyncOnly;
    if (name == "IndepOnly") return ForcingSchedule::IndepOnly;
    if (name == "ProgForcing") return ForcingSchedule::ProgForcing;
    throw ConfigError("unknown schedule '" + name + "'");
}

void RunConfig::validate() const {
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (delta_max < 0.0) throw ConfigError("delta_max must be >= 0");
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("ratios must sum to 1");
    if (sample_steps < 1) throw ConfigError("sample_steps must be >= 1");
    if (frames < 8) throw ConfigError("frames must be >= 8");
    if (episodes < 1) throw ConfigError("episodes must be >= 1");
    model_config().validate();
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.layers_video = layers_video;
    m.layers_audio = layers_audio;
    m.dim = dim;
    m.heads = heads;
    m.tokens_per_frame = tokens_per_frame;
    m.cond_dim = cond_dim;
    m.disable_hghs = disable_hghs;
    m.disable_biaca = disable_biaca;
    m.disable_scg = disable_scg;
    return m;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    RunConfig cfg;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const nlohmann::json& v = it.value();
        try {
            if (key == "total_steps") cfg.total_steps = v.get<long>();
            else if (key == "batch_size") cfg.batch_size = v.get<int>();
            else if (key == "learning_rate") cfg.learning_rate = v.get<double>();
            else if (key == "lambda") cfg.lambda = v.get<double>();
            else if (key == "delta_max") cfg.delta_max = v.get<double>();
            else if (key == "ratios") {
                auto r = v.get<std::vector<double>>();
                if (r.size() != 3) throw ConfigError("ratios must have exactly 3 entries");
                cfg.ratios = {r[0], r[1], r[2]};
            }
            else if (key == "cfg_scale") cfg.cfg_scale = v.get<double>();
            else if (key == "sample_steps") cfg.sample_steps = v.get<int>();
            else if (key == "seed") cfg.seed = v.get<std::uint64_t>();
            else if (key == "disable_HGHS") cfg.disable_hghs = v.get<bool>();
            else if (key == "disable_BiACA") cfg.disable_biaca = v.get<bool>();
            else if (key == "disable_SCG") cfg.disable_scg = v.get<bool>();
            else if (key == "disable_CMFS") cfg.disable_cmfs = v.get<bool>();
            else if (key == "schedule") cfg.schedule = parse_schedule(v.get<std::string>());
            else if (key == "freeze_video") cfg.freeze_video = v.get<bool>();
            else if (key == "layers_video") cfg.layers_video = v.get<int>();
            else if (key == "layers_audio") cfg.layers_audio = v.get<int>();
            else if (key == "dim") cfg.dim = v.get<int>();
            else if (key == "heads") cfg.heads = v.get<int>();
            else if (key == "tokens_per_frame") cfg.tokens_per_frame = v.get<int>();
            else if (key == "cond_dim") cfg.cond_dim = v.get<int>();
            else if (key == "frames") cfg.frames = v.get<int>();
            else if (key == "episodes") cfg.episodes = v.get<int>();
            else if (key == "data_seed") cfg.data_seed = v.get<std::uint64_t>();
            else if (key == "out_dir") cfg.out_dir = v.get<std::string>();
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad value for config key '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return from_json_text(buffer.str());
}

Adam::Adam(const ParamRefs& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params[i]->value.size()), 0.0);
        v_[i].assign(static_cast<std::size_t>(params[i]->value.size()), 0.0);
    }
}

void Adam::step(Graph& g, const ParamRefs& params, const Gradients& grads) {
    if (params.size() != m_.size()) throw ContractError("Adam: parameter set changed size");
    ++t_;
    const double corr1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double corr2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter* p = params[i];
        if (!p->trainable) continue;
        const int node = p->bound_node(g);
        if (node < 0) continue;
        const std::vector<double>& grad = grads.at_node(node).values();
        std::vector<double>& value = p->value.mutate_data();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * grad[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * grad[j] * grad[j];
            const double mhat = m[j] / corr1;
            const double vhat = v[j] / corr2;
            value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

std::pair<Tensor, Tensor> dual_audio_loss(const Tensor& v_speech_pred, const Tensor& v_sfx_pred,
                                          const FlowSample& speech_sample, const FlowSample& sfx_sample) {
    return {cfm_loss(v_speech_pred, speech_sample), cfm_loss(v_sfx_pred, sfx_sample)};
}

CurriculumState schedule_state(const RunConfig& cfg, long step) {
    if (step < 0 || step >= cfg.total_steps) throw DomainError("schedule_state: step outside run");
    const ForcingSchedule effective = cfg.disable_cmfs ? ForcingSchedule::SyncOnly : cfg.schedule;
    CurriculumState s;
    s.step = step;
    s.total_steps = cfg.total_steps;
    s.delta_max = cfg.delta_max;
    s.lambda = cfg.lambda;
    switch (effective) {
        case ForcingSchedule::SyncOnly:
            s.phase = Phase::SyncWarmup;
            s.p_independent = 0.0;
            s.reweight_active = false;
            return s;
        case ForcingSchedule::IndepOnly:
            s.phase = Phase::FullIndependence;
            s.p_independent = 1.0;
            s.reweight_active = true;
            return s;
        case ForcingSchedule::ProgForcing:
            return curriculum_state(step, cfg.total_steps, cfg.ratios, cfg.delta_max, cfg.lambda);
    }
    return s;
}

namespace {

Tensor stack_feature(const std::vector<const Episode*>& batch, const Tensor Episode::* field) {
    const Tensor& first = batch[0]->*field;
    std::vector<double> data;
    data.reserve(batch.size() * static_cast<std::size_t>(first.size()));
    for (const Episode* ep : batch) {
        const auto& v = (ep->*field).values();
        data.insert(data.end(), v.begin(), v.end());
    }
    Shape shape = first.shape();
    shape.insert(shape.begin(), static_cast<int>(batch.size()));
    return Tensor(std::move(shape), std::move(data));
}

int find_bad_sample(const FusionModel::Velocities& v, int batch) {
    auto scan = [&](const Tensor& t) -> int {
        if (!t.defined()) return -1;
        const std::int64_t per = t.size() / batch;
        const auto& vals = t.values();
        for (int b = 0; b < batch; ++b)
            for (std::int64_t i = 0; i < per; ++i)
                if (!std::isfinite(vals[static_cast<std::size_t>(b * per + i)])) return b;
        return -1;
    };
    int idx = scan(v.video);
    if (idx < 0) idx = scan(v.speech);
    if (idx < 0) idx = scan(v.sfx);
    return idx;
}

}  // namespace

StepReport ti2av_step(FusionModel& model, const std::vector<const Episode*>& batch, const CurriculumState& state,
                      Adam& optimizer, Rng& rng) {
    if (batch.empty()) throw ContractError("ti2av_step: empty batch");
    const bool mixed = model.config().disable_hghs;

    const TimestepPair pair = sample_pair(state, rng);

    Tensor video_data = stack_feature(batch, &Episode::video);
    Tensor speech_data = stack_feature(batch, &Episode::speech);
    Tensor sfx_data = stack_feature(batch, &Episode::sfx);
    if (mixed) speech_data = add(speech_data, sfx_data);  // mixed stream = speech + sfx

    Tensor video_noise = Tensor::randn(video_data.shape(), rng);
    Tensor speech_noise = Tensor::randn(speech_data.shape(), rng);
    Tensor sfx_noise;
    if (!mixed) sfx_noise = Tensor::randn(sfx_data.shape(), rng);

    FlowSample video_sample = interpolate(video_noise, video_data, pair.t_video);
    FlowSample speech_sample = interpolate(speech_noise, speech_data, pair.t_audio);
    FlowSample sfx_sample;
    if (!mixed) sfx_sample = interpolate(sfx_noise, sfx_data, pair.t_audio);

    ConditionPair cond = stack_conditions(batch);

    Graph g;
    DualStreamLatent noisy;
    noisy.speech = speech_sample.x_t;
    if (!mixed) noisy.sfx = sfx_sample.x_t;
    FusionModel::Velocities vel = model.forward(g, video_sample.x_t, noisy, pair.t_video, pair.t_audio, cond);

    Tensor loss_v = cfm_loss(vel.video, video_sample);
    Tensor loss_sp;
    Tensor loss_sfx;
    if (mixed) {
        loss_sp = cfm_loss(vel.speech, speech_sample);
    } else {
        auto [lsp, lsfx] = dual_audio_loss(vel.speech, vel.sfx, speech_sample, sfx_sample);
        loss_sp = lsp;
        loss_sfx = lsfx;
    }
    Tensor audio_term = mixed ? loss_sp : add(loss_sp, loss_sfx);
    Tensor total = add(scale(loss_v, pair.weight_video), scale(audio_term, pair.weight_audio));

    if (!std::isfinite(total.item())) {
        const int bad = find_bad_sample(vel, static_cast<int>(batch.size()));
        throw EvalError("ti2av_step: non-finite loss at step " + std::to_string(state.step) +
                        (bad >= 0 ? ", offending sample index " + std::to_string(bad) : ", source not localized"));
    }

    Gradients grads = g.backward(total);
    optimizer.step(g, model.parameters(), grads);

    StepReport r;
    r.step = state.step;
    r.phase = state.phase;
    r.t_v = pair.t_video;
    r.t_a = pair.t_audio;
    r.d = pair.audio_leads;
    r.w_v = pair.weight_video;
    r.w_a = pair.weight_audio;
    r.loss_v = loss_v.item();
    r.loss_sp = loss_sp.item();
    r.loss_sfx = mixed ? 0.0 : loss_sfx.item();
    r.loss_total = total.item();
    return r;
}

const char* const kMetricsHeader = "step,phase,t_v,t_a,d,w_v,w_a,loss_v,loss_sp,loss_sfx,loss_total";

std::string format_metrics_row(const StepReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%ld,%s,%.17g,%.17g,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  r.step, phase_name(r.phase), r.t_v, r.t_a, r.d, r.w_v, r.w_a,
                  r.loss_v, r.loss_sp, r.loss_sfx, r.loss_total);
    return std::string(buf);
}

RunArtifacts train(const RunConfig& cfg) {
    cfg.validate();

    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    const std::string metrics_path = cfg.out_dir + "/metrics.csv";
    std::ofstream metrics(metrics_path);
    if (!metrics) throw IoError("train: cannot write metrics to '" + metrics_path + "'");
    metrics << kMetricsHeader << "\n";

    FeatureDims dims{cfg.dim, cfg.dim, cfg.cond_dim};
    std::vector<Episode> data;
    data.reserve(static_cast<std::size_t>(cfg.episodes));
    for (int i = 0; i < cfg.episodes; ++i) {
        const auto cls = static_cast<EpisodeClass>(i % 3);
        data.push_back(generate_episode(cfg.data_seed + static_cast<std::uint64_t>(i), cfg.frames,
                                        cfg.tokens_per_frame, cls, dims));
    }

    Rng rng(cfg.seed);
    FusionModel model(cfg.model_config(), rng);
    if (cfg.freeze_video) {
        for (Parameter* p : model.video_parameters()) p->trainable = false;
    }

    Adam optimizer(model.parameters(), cfg.learning_rate);
    const long checkpoint_every = std::max<long>(1, cfg.total_steps / 10);

    for (long step = 0; step < cfg.total_steps; ++step) {
        std::vector<const Episode*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&data[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(data.size())))]);

        CurriculumState state = schedule_state(cfg, step);
        StepReport report = ti2av_step(model, batch, state, optimizer, rng);
        metrics << format_metrics_row(report) << "\n";

        if ((step + 1) % checkpoint_every == 0 && step + 1 < cfg.total_steps) {
            char name[64];
            std::snprintf(name, sizeof(name), "/checkpoint_%06ld.unis", step + 1);
            save_checkpoint(cfg.out_dir + name, model, cfg.frames);
        }
    }
    metrics.close();
    if (!metrics) throw IoError("train: failed writing '" + metrics_path + "'");

    const std::string ckpt_path = cfg.out_dir + "/checkpoint_final.unis";
    save_checkpoint(ckpt_path, model, cfg.frames);
    return {ckpt_path, metrics_path};
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_record(std::ofstream& out, const std::string& name, const Shape& shape, const std::vector<double>& values) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double d : values) {
        float f = static_cast<float>(d);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

}  // namespace

void save_checkpoint(const std::string& path, FusionModel& model, int frames) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write("UNIS", 4);
    put_u32(out, kCheckpointVersion);

    const ModelConfig& c = model.config();
    const std::vector<double> meta = {
        static_cast<double>(c.layers_video), static_cast<double>(c.layers_audio), static_cast<double>(c.dim),
        static_cast<double>(c.heads), static_cast<double>(c.tokens_per_frame), static_cast<double>(c.cond_dim),
        static_cast<double>(frames), c.disable_hghs ? 1.0 : 0.0, c.disable_biaca ? 1.0 : 0.0,
        c.disable_scg ? 1.0 : 0.0};
    write_record(out, "meta/config", {static_cast<int>(meta.size())}, meta);

    for (Parameter* p : model.parameters()) write_record(out, p->name, p->value.shape(), p->value.values());
    if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
}

LoadedModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "UNIS", 4) != 0) throw IoError("checkpoint: bad magic in '" + path + "'");
    const std::uint32_t version = get_u32(in);
    if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));

    std::map<std::string, Tensor> records;
    while (true) {
        unsigned char probe;
        in.read(reinterpret_cast<char*>(&probe), 1);
        if (in.eof()) break;
        if (!in) throw IoError("checkpoint: read failed");
        in.putback(static_cast<char>(probe));

        const std::uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = get_u32(in);
        Shape shape;
        std::int64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<int>(get_u32(in)));
            count *= shape.back();
        }
        std::vector<double> values(static_cast<std::size_t>(count));
        for (auto& v : values) {
            const std::uint32_t bits = get_u32(in);
            float f;
            std::memcpy(&f, &bits, 4);
            v = static_cast<double>(f);
        }
        records.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
    }

    auto meta_it = records.find("meta/config");
    if (meta_it == records.end()) throw IoError("checkpoint: missing meta/config record");
    const auto& meta = meta_it->second.values();
    if (meta.size() != 10) throw IoError("checkpoint: malformed meta/config record");

    ModelConfig cfg;
    cfg.layers_video = static_cast<int>(meta[0]);
    cfg.layers_audio = static_cast<int>(meta[1]);
    cfg.dim = static_cast<int>(meta[2]);
    cfg.heads = static_cast<int>(meta[3]);
    cfg.tokens_per_frame = static_cast<int>(meta[4]);
    cfg.cond_dim = static_cast<int>(meta[5]);
    cfg.disable_hghs = meta[7] != 0.0;
    cfg.disable_biaca = meta[8] != 0.0;
    cfg.disable_scg = meta[9] != 0.0;

    Rng init_rng(0);
    LoadedModel loaded{cfg, static_cast<int>(meta[6]), FusionModel(cfg, init_rng)};
    for (Parameter* p : loaded.model.parameters()) {
        auto it = records.find(p->name);
        if (it == records.end()) throw IoError("checkpoint: missing parameter record '" + p->name + "'");
        if (it->second.shape() != p->value.shape())
            throw IoError("checkpoint: parameter '" + p->name + "' has shape " + shape_str(it->second.shape()) +
                          ", model expects " + shape_str(p->value.shape()));
        p->value.mutate_data() = it->second.values();
    }
    return loaded;
}

}  // namespace avflow
