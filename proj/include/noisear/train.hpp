#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "noisear/data.hpp"
#include "noisear/model.hpp"

namespace noisear {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 40;
    double base_lr = 6.25e-5;
    double recon_weight = 0.2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t warmup_steps = 0;
    double grad_clip = 0.0;  // max grad norm; 0 disables
    std::uint64_t seed = 0;
    bool determinism = true;

    std::string checkpoint_path;  // written after the final epoch when nonempty
    std::string metrics_path;     // per-epoch "epoch nll recon total lr" lines

    void validate() const;
};

struct LossReport {
    double nll = 0.0;    // mean per-element negative log-likelihood
    double recon = 0.0;  // mean squared error of the reparameterized sample
    double total = 0.0;  // nll + recon_weight * recon
};

// Per-element-normalized loss of one sequence with fixed reparameterization
// noise eps (M x K standard normal draws). When grad is non-null the gradient
// of nll + recon_weight * recon is accumulated into it.
LossReport sequence_loss(const Model& model, const PatchSequence& seq,
                         const Condition& cond, const std::vector<double>& eps,
                         double recon_weight, std::vector<double>* grad);

// Batch loss; draws reparameterization noise from rng; grads averaged over rows.
LossReport compute_loss(const Model& model,
                        const std::vector<std::pair<PatchSequence, Condition>>& batch,
                        Rng& rng, double recon_weight, std::vector<double>* grad);

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

class AdamOptimizer {
public:
    explicit AdamOptimizer(std::size_t n_params) : m_(n_params, 0.0), v_(n_params, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad, double lr,
              double beta1, double beta2, double eps);

private:
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

// Teacher-forced maximum-likelihood training. Returns per-epoch loss history.
std::vector<LossReport> fit(Model& model, const Dataset& data, const TrainConfig& cfg);

}  // namespace noisear
