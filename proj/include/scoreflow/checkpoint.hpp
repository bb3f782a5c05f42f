#pragma once

// Versioned JSON checkpoints: field parameters, Adam moments and sampler state.

#include <cstdint>
#include <memory>
#include <random>
#include <string>

#include "scoreflow/training.hpp"
#include "scoreflow/velocity.hpp"

namespace scoreflow {

constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  std::string problem;
  std::string field_kind;
  std::size_t dim = 0;
  std::size_t width = 0;          // mlp only
  std::size_t n_steps = 0;        // quadratic only
  double dt = 0.0;                // quadratic only
  double t0 = 0.0;                // quadratic only
  double ou_rate = 0.0;           // quadratic only
  double stage_t0 = 0.0;
  double stage_t_end = 1.0;
  std::vector<Tensor> params;
  AdamState adam;
  std::string rng_state;          // textual mt19937_64 state
};

Checkpoint make_checkpoint(const std::string& problem, const VelocityField& field,
                           const RunReport& report);

std::string checkpoint_to_json(const Checkpoint& ck);
// Throws std::runtime_error on malformed input or an unsupported version.
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Field rebuilt from a checkpoint with its parameters restored.
std::unique_ptr<VelocityField> field_from_checkpoint(const Checkpoint& ck);
std::mt19937_64 rng_from_checkpoint(const Checkpoint& ck);

}  // namespace scoreflow
