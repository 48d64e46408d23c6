#pragma once

#include <array>
#include <string>
#include <vector>

#include "avflow/flow.hpp"
#include "avflow/model.hpp"
#include "avflow/schedule.hpp"
#include "avflow/toy_world.hpp"

namespace avflow {

enum class ForcingSchedule { SyncOnly, IndepOnly, ProgForcing };

const char* schedule_name(ForcingSchedule s);
ForcingSchedule parse_schedule(const std::string& name);

struct RunConfig {
    long total_steps = 2000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double lambda = 0.5;
    double delta_max = 0.25;
    std::array<double, 3> ratios{0.3, 0.4, 0.3};
    double cfg_scale = 6.0;
    int sample_steps = 50;
    std::uint64_t seed = 0;

    bool disable_hghs = false;
    bool disable_biaca = false;
    bool disable_scg = false;
    bool disable_cmfs = false;
    ForcingSchedule schedule = ForcingSchedule::ProgForcing;
    bool freeze_video = false;

    int layers_video = 4;
    int layers_audio = 3;
    int dim = 32;
    int heads = 4;
    int tokens_per_frame = 2;
    int cond_dim = 8;
    int frames = 16;
    int episodes = 24;
    std::uint64_t data_seed = 12345;
    std::string out_dir = "runs/default";

    void validate() const;
    ModelConfig model_config() const;

    /// Strict parse: unknown keys are rejected, known keys override defaults.
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
};

struct StepReport {
    long step = 0;
    Phase phase = Phase::SyncWarmup;
    double t_v = 0.0;
    double t_a = 0.0;
    int d = 0;
    double w_v = 1.0;
    double w_a = 1.0;
    double loss_v = 0.0;
    double loss_sp = 0.0;
    double loss_sfx = 0.0;
    double loss_total = 0.0;
};

/// Adaptive moment estimation over a fixed parameter ordering.
class Adam {
  public:
    Adam(const ParamRefs& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Apply one update from the gradients of the given graph's bindings.
    void step(Graph& g, const ParamRefs& params, const Gradients& grads);

  private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

/// Independent per-stream flow-matching losses (no cross terms).
std::pair<Tensor, Tensor> dual_audio_loss(const Tensor& v_speech_pred, const Tensor& v_sfx_pred,
                                          const FlowSample& speech_sample, const FlowSample& sfx_sample);

/// Effective curriculum state for a step under the configured schedule.
CurriculumState schedule_state(const RunConfig& cfg, long step);

/// One optimization step of the direction-weighted two-branch objective.
StepReport ti2av_step(FusionModel& model, const std::vector<const Episode*>& batch, const CurriculumState& state,
                      Adam& optimizer, Rng& rng);

struct RunArtifacts {
    std::string checkpoint_path;
    std::string metrics_path;
};

RunArtifacts train(const RunConfig& cfg);

// Checkpoint container: "UNIS" magic, u32 format version, then repeated
// records of {u32 name length, name bytes, u32 rank, u32 dims, f32 payload}.
void save_checkpoint(const std::string& path, FusionModel& model, int frames);

struct LoadedModel {
    ModelConfig config;
    int frames = 0;
    FusionModel model;
};

LoadedModel load_checkpoint(const std::string& path);

std::string format_metrics_row(const StepReport& r);
extern const char* const kMetricsHeader;

}  // namespace avflow
