#include "noisear/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "noisear/checkpoint.hpp"
#include "noisear/gaussian.hpp"

namespace noisear {

void TrainConfig::validate() const {
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(base_lr >= 0.0, "base_lr must be >= 0");
    require(recon_weight >= 0.0, "recon_weight must be >= 0");
    require(grad_clip >= 0.0, "grad_clip must be >= 0");
}

LossReport sequence_loss(const Model& model, const PatchSequence& seq,
                         const Condition& cond, const std::vector<double>& eps,
                         double recon_weight, std::vector<double>* grad) {
    const std::size_t m = model.config().shape.num_patches();
    const std::size_t k = model.config().shape.patch_elems();
    require(eps.size() == m * k, "eps length mismatch");

    Tape tape;
    const auto params = model.forward_teacher_forced(seq, cond, grad ? &tape : nullptr);

    const double inv_n = 1.0 / static_cast<double>(m * k);
    double nll = 0.0, recon = 0.0;
    std::vector<double> d_mean, d_log_var;
    if (grad) {
        d_mean.assign(m * k, 0.0);
        d_log_var.assign(m * k, 0.0);
    }
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < k; ++i) {
            const double x = seq.patches[j][i];
            const double mu = params[j].mean[i];
            const double lv = params[j].log_var[i];
            nll -= logpdf_element(x, mu, lv);
            const double sigma_eps = std::exp(0.5 * lv) * eps[j * k + i];
            const double r = mu + sigma_eps - x;  // reparameterized sample residual
            recon += r * r;
            if (grad) {
                const ElemGrads g = nll_grads(x, mu, lv);
                d_mean[j * k + i] = (g.d_mean + recon_weight * 2.0 * r) * inv_n;
                d_log_var[j * k + i] =
                    (g.d_log_var + recon_weight * 2.0 * r * 0.5 * sigma_eps) * inv_n;
            }
        }
    }
    if (grad) model.backward(tape, d_mean, d_log_var, *grad);

    LossReport report;
    report.nll = nll * inv_n;
    report.recon = recon * inv_n;
    report.total = report.nll + recon_weight * report.recon;
    return report;
}

LossReport compute_loss(const Model& model,
                        const std::vector<std::pair<PatchSequence, Condition>>& batch,
                        Rng& rng, double recon_weight, std::vector<double>* grad) {
    require(!batch.empty(), "batch must be nonempty");
    const std::size_t n_elems = model.config().shape.total_elems();
    std::vector<double> eps(n_elems);
    LossReport sum;
    for (const auto& [seq, cond] : batch) {
        for (auto& e : eps) e = rng.normal();
        const LossReport r = sequence_loss(model, seq, cond, eps, recon_weight, grad);
        sum.nll += r.nll;
        sum.recon += r.recon;
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    if (grad)
        for (auto& g : *grad) g *= inv_b;
    LossReport report;
    report.nll = sum.nll * inv_b;
    report.recon = sum.recon * inv_b;
    report.total = report.nll + recon_weight * report.recon;
    return report;
}

double lr_schedule(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    require(step <= total_steps, "step out of range");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step + 1) /
               static_cast<double>(cfg.warmup_steps);
    const std::size_t s = step - cfg.warmup_steps;
    const std::size_t t = total_steps - cfg.warmup_steps;
    if (t == 0) return cfg.base_lr;
    return cfg.base_lr * 0.5 *
           (1.0 + std::cos(M_PI * static_cast<double>(s) / static_cast<double>(t)));
}

void AdamOptimizer::step(std::vector<double>& params, const std::vector<double>& grad,
                         double lr, double beta1, double beta2, double eps) {
    require(params.size() == m_.size() && grad.size() == m_.size(),
            "optimizer size mismatch");
    t_ += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1 * m_[i] + (1.0 - beta1) * grad[i];
        v_[i] = beta2 * v_[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

std::vector<LossReport> fit(Model& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    require(!data.records.empty(), "dataset is empty");
    require(data.matches(model.config().shape),
            "dataset shape does not match model config");

    const TensorShape shape = model.config().shape;
    const std::size_t n = data.records.size();

    // patchify once up front
    std::vector<std::pair<PatchSequence, Condition>> rows;
    rows.reserve(n);
    for (const auto& [cond, tensor] : data.records) {
        NoiseTensor t = tensor;
        t.shape = shape;
        rows.emplace_back(patchify(t), cond);
    }

    const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * batches_per_epoch;

    AdamOptimizer opt(model.num_params());
    Rng shuffle_rng = Rng(cfg.seed).split(1);
    Rng recon_rng = Rng(cfg.seed).split(2);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(model.num_params());

    std::ofstream metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.open(cfg.metrics_path);
        if (!metrics) throw io_error("cannot open metrics log: " + cfg.metrics_path);
    }

    std::vector<LossReport> history;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);

        LossReport epoch_sum;
        double last_lr = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b) {
            const std::size_t lo = b * cfg.batch_size;
            const std::size_t hi = std::min(lo + cfg.batch_size, n);
            std::vector<std::pair<PatchSequence, Condition>> batch;
            batch.reserve(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) batch.push_back(rows[order[i]]);

            std::fill(grad.begin(), grad.end(), 0.0);
            const LossReport r =
                compute_loss(model, batch, recon_rng, cfg.recon_weight, &grad);
            if (!std::isfinite(r.total))
                throw numerical_error("non-finite loss at step " + std::to_string(step));

            if (cfg.grad_clip > 0.0) {
                double norm2 = 0.0;
                for (double g : grad) norm2 += g * g;
                const double norm = std::sqrt(norm2);
                if (norm > cfg.grad_clip) {
                    const double s = cfg.grad_clip / norm;
                    for (auto& g : grad) g *= s;
                }
            }

            last_lr = lr_schedule(step, total_steps, cfg);
            opt.step(model.params(), grad, last_lr, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps);
            step += 1;
            epoch_sum.nll += r.nll;
            epoch_sum.recon += r.recon;
        }

        LossReport epoch_report;
        epoch_report.nll = epoch_sum.nll / static_cast<double>(batches_per_epoch);
        epoch_report.recon = epoch_sum.recon / static_cast<double>(batches_per_epoch);
        epoch_report.total = epoch_report.nll + cfg.recon_weight * epoch_report.recon;
        history.push_back(epoch_report);
        if (metrics.is_open())
            metrics << epoch + 1 << ' ' << epoch_report.nll << ' ' << epoch_report.recon
                    << ' ' << epoch_report.total << ' ' << last_lr << '\n';
    }

    if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    return history;
}

}  // namespace noisear
