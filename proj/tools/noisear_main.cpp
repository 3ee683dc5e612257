// noisear: single-binary command-line front end.
//
// Subcommands: gen-data, train, sample, score, eval, pairs, dpo, flops, audit.
// Configuration comes from a JSON file with a fixed key schema; command-line
// flags override file values. Exit codes: 0 success, 2 configuration or
// validation error, 3 I/O error, 4 numerical failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "noisear/checkpoint.hpp"
#include "noisear/data.hpp"
#include "noisear/eval.hpp"
#include "noisear/model.hpp"
#include "noisear/pref.hpp"
#include "noisear/sample.hpp"
#include "noisear/train.hpp"
#include "noisear/wire.hpp"

namespace {

using nlohmann::json;
using namespace noisear;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// Fixed configuration schema; unknown keys are rejected.
RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw invalid_input(std::string("bad config document: ") + e.what());
    }
    if (!j.is_object()) throw invalid_input("config root must be an object");

    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "channels") cfg.model.shape.channels = value.get<std::size_t>();
            else if (key == "height") cfg.model.shape.height = value.get<std::size_t>();
            else if (key == "width") cfg.model.shape.width = value.get<std::size_t>();
            else if (key == "patch_size") cfg.model.shape.patch_size = value.get<std::size_t>();
            else if (key == "d_model") cfg.model.d_model = value.get<std::size_t>();
            else if (key == "n_heads") cfg.model.n_heads = value.get<std::size_t>();
            else if (key == "n_decoder_layers") cfg.model.n_decoder_layers = value.get<std::size_t>();
            else if (key == "n_head_layers") cfg.model.n_head_layers = value.get<std::size_t>();
            else if (key == "ffn_mult") cfg.model.ffn_mult = value.get<std::size_t>();
            else if (key == "vocab_size") cfg.model.vocab_size = value.get<std::size_t>();
            else if (key == "cond_max_len") cfg.model.cond_max_len = value.get<std::size_t>();
            else if (key == "log_var_clamp_lo") cfg.model.log_var_clamp_lo = value.get<double>();
            else if (key == "log_var_clamp_hi") cfg.model.log_var_clamp_hi = value.get<double>();
            else if (key == "model_seed") cfg.model.seed = value.get<std::uint64_t>();
            else if (key == "epochs") cfg.train.epochs = value.get<std::size_t>();
            else if (key == "batch_size") cfg.train.batch_size = value.get<std::size_t>();
            else if (key == "base_lr") cfg.train.base_lr = value.get<double>();
            else if (key == "recon_weight") cfg.train.recon_weight = value.get<double>();
            else if (key == "adam_beta1") cfg.train.adam_beta1 = value.get<double>();
            else if (key == "adam_beta2") cfg.train.adam_beta2 = value.get<double>();
            else if (key == "adam_eps") cfg.train.adam_eps = value.get<double>();
            else if (key == "warmup_steps") cfg.train.warmup_steps = value.get<std::size_t>();
            else if (key == "grad_clip") cfg.train.grad_clip = value.get<double>();
            else if (key == "train_seed") cfg.train.seed = value.get<std::uint64_t>();
            else if (key == "determinism") cfg.train.determinism = value.get<bool>();
            else if (key == "checkpoint_path") cfg.train.checkpoint_path = value.get<std::string>();
            else if (key == "metrics_path") cfg.train.metrics_path = value.get<std::string>();
            else throw invalid_input("unknown config key: " + key);
        } catch (const json::exception& e) {
            throw invalid_input("bad value for config key '" + key + "': " + e.what());
        }
    }
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

std::vector<std::uint32_t> parse_tokens(const std::string& text) {
    std::vector<std::uint32_t> tokens;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw invalid_input("empty token in condition list");
        try {
            tokens.push_back(static_cast<std::uint32_t>(std::stoul(item)));
        } catch (const std::exception&) {
            throw invalid_input("bad condition token: " + item);
        }
    }
    require(!tokens.empty(), "condition must be nonempty");
    return tokens;
}

// "1,2;3;4,5" -> three conditions
std::vector<Condition> parse_conditions(const std::string& text) {
    std::vector<Condition> conds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ';'))
        if (!item.empty()) conds.push_back(Condition{parse_tokens(item)});
    require(!conds.empty(), "no conditions given");
    return conds;
}

void write_raw_tensor(const NoiseTensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    for (double v : t.values) wire::write_f32(out, static_cast<float>(v));
    if (!out) throw io_error("write failed: " + path);
}

NoiseTensor read_raw_tensor(const std::string& path, const TensorShape& shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    NoiseTensor t;
    t.shape = shape;
    t.values.resize(shape.total_elems());
    for (auto& v : t.values) v = static_cast<double>(wire::read_f32(in));
    char extra;
    if (in.read(&extra, 1)) throw io_error("tensor file larger than the model shape");
    return t;
}

void write_text_file(const std::string& text, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw io_error("write failed: " + path);
}

int cmd_gen_data(const std::string& config_path, const std::string& out,
                 std::size_t n, std::uint64_t seed, std::uint32_t token_range) {
    const RunConfig cfg = load_run_config(config_path);
    const std::uint32_t range =
        token_range > 0 ? token_range
                        : static_cast<std::uint32_t>(cfg.model.vocab_size);
    require(range <= cfg.model.vocab_size, "token range exceeds vocabulary");

    Dataset d;
    d.channels = static_cast<std::uint32_t>(cfg.model.shape.channels);
    d.height = static_cast<std::uint32_t>(cfg.model.shape.height);
    d.width = static_cast<std::uint32_t>(cfg.model.shape.width);
    d.cond_max_len = static_cast<std::uint32_t>(cfg.model.cond_max_len);
    d.vocab_size = static_cast<std::uint32_t>(cfg.model.vocab_size);

    Rng rng(seed);
    d.records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Condition cond{{static_cast<std::uint32_t>(rng.next_u64() % range)}};
        Rng noise = rng.split(i + 1);
        d.records.emplace_back(cond, oracle_generate(cond, cfg.model.shape, noise));
    }
    write_dataset(d, out);
    std::cerr << "wrote " << n << " records to " << out << '\n';
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out, const std::string& metrics) {
    RunConfig cfg = load_run_config(config_path);
    cfg.train.checkpoint_path = out;
    if (!metrics.empty()) cfg.train.metrics_path = metrics;

    const Dataset data = read_dataset(data_path);
    require(data.matches(cfg.model.shape), "dataset shape does not match config");

    Model model = Model::init_params(cfg.model);
    const auto history = fit(model, data, cfg.train);
    for (std::size_t e = 0; e < history.size(); ++e)
        std::cerr << "epoch " << (e + 1) << ": nll " << history[e].nll << " recon "
                  << history[e].recon << " total " << history[e].total << '\n';
    std::cout << "final_nll = " << history.back().nll << '\n';
    return 0;
}

int cmd_sample(const std::string& model_path, const std::string& cond_text,
               std::uint64_t seed, const std::string& mode_text, double temperature,
               const std::string& out) {
    const Model model = load_checkpoint(model_path);
    const Condition cond{parse_tokens(cond_text)};
    SampleMode mode;
    if (mode_text == "stochastic") mode = SampleMode::Stochastic;
    else if (mode_text == "deterministic") mode = SampleMode::Deterministic;
    else throw invalid_input("mode must be stochastic or deterministic");

    const SampleResult sr = sample_noise(model, cond, seed, mode, temperature);
    write_raw_tensor(sr.tensor, out);

    std::ostringstream meta;
    meta.precision(17);
    meta << "channels = " << sr.tensor.shape.channels << '\n'
         << "height = " << sr.tensor.shape.height << '\n'
         << "width = " << sr.tensor.shape.width << '\n'
         << "patch_size = " << sr.tensor.shape.patch_size << '\n'
         << "seed = " << sr.seed << '\n'
         << "mode = " << mode_text << '\n'
         << "temperature = " << sr.temperature << '\n'
         << "total_logprob = " << sr.total_logprob << '\n';
    write_text_file(meta.str(), out + ".meta");
    std::cerr << "wrote " << out << " and " << out << ".meta\n";
    return 0;
}

int cmd_score(const std::string& model_path, const std::string& tensor_path,
              const std::string& cond_text) {
    const Model model = load_checkpoint(model_path);
    const NoiseTensor t = read_raw_tensor(tensor_path, model.config().shape);
    const auto lp = sequence_logprob(model, t, Condition{parse_tokens(cond_text)});
    std::cout.precision(17);
    std::cout << "total_logprob = " << lp.total << '\n';
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& report_path, std::size_t trials) {
    const Model model = load_checkpoint(model_path);
    const Dataset data = read_dataset(data_path);
    const EvalReport report = evaluate(model, data, trials);
    const std::string text = report.to_text();
    std::cout << text;
    if (!report_path.empty()) write_text_file(text, report_path);
    return 0;
}

int cmd_pairs(const std::string& model_path, const std::string& conds_text,
              std::size_t n_conds, std::size_t rollouts, double gap,
              std::uint64_t seed, const std::string& out) {
    const Model model = load_checkpoint(model_path);
    std::vector<Condition> conds;
    if (!conds_text.empty()) {
        conds = parse_conditions(conds_text);
    } else {
        require(n_conds >= 1, "need --conds or --n-conds >= 1");
        Rng rng(seed);
        for (std::size_t i = 0; i < n_conds; ++i)
            conds.push_back(Condition{{static_cast<std::uint32_t>(
                rng.next_u64() % model.config().vocab_size)}});
    }
    const auto pairs = build_pairs(model, conds, rollouts, reward_synthetic, gap, seed);
    write_pairs(pairs, model.config().shape,
                static_cast<std::uint32_t>(model.config().cond_max_len),
                static_cast<std::uint32_t>(model.config().vocab_size), out);
    std::cerr << "kept " << pairs.size() << " of " << conds.size()
              << " candidate pairs\n";
    return 0;
}

int cmd_dpo(const std::string& model_path, const std::string& pairs_path,
            const std::string& out, const std::string& mode_text, double beta,
            std::size_t steps, double lr, std::size_t batch) {
    const Model model = load_checkpoint(model_path);
    const auto pairs = read_pairs(pairs_path, nullptr);
    FinetuneMode mode;
    if (mode_text == "dpo") mode = FinetuneMode::Dpo;
    else if (mode_text == "preferred-nll") mode = FinetuneMode::PreferredNll;
    else throw invalid_input("mode must be dpo or preferred-nll");

    if (steps == 0) {
        save_checkpoint(model, out);  // zero steps: emit the input unchanged
        std::cerr << "0 steps requested; checkpoint copied unchanged\n";
        return 0;
    }
    TrainConfig cfg;
    cfg.base_lr = lr;
    cfg.batch_size = batch;
    const Model tuned = finetune(model, pairs, mode, cfg, beta, steps);
    save_checkpoint(tuned, out);
    std::cout << "mean_pair_margin = " << mean_pair_margin(tuned, pairs) << '\n';
    return 0;
}

int cmd_flops(const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    std::cout << "flops_estimate = " << estimate_flops(cfg.model) << '\n';
    return 0;
}

int cmd_audit(const std::string& model_path, std::size_t trials, std::uint64_t seed) {
    const Model model = load_checkpoint(model_path);
    std::cout.precision(17);
    std::cout << "causality_max_deviation = " << audit_causality(model, trials, seed)
              << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"noisear: autoregressive prior over diffusion initial noise"};
    app.require_subcommand(1);
    int threads = 1;  // worker cap; all current kernels are single-threaded
    app.add_option("--threads", threads, "maximum worker threads")
        ->check(CLI::PositiveNumber);

    std::string config_path, data_path, model_path, out_path, metrics_path;
    std::string report_path, cond_text, conds_text, tensor_path, pairs_path;
    std::string mode_text = "stochastic";
    std::string ft_mode = "dpo";
    std::uint64_t seed = 0;
    std::size_t n = 0, rollouts = 20, n_conds = 0, steps = 100, batch = 8, trials = 100;
    std::uint32_t token_range = 0;
    double temperature = 1.0, gap = 3.0, beta = 0.1, lr = 1e-4;

    auto* gen = app.add_subcommand("gen-data", "generate synthetic oracle records");
    gen->add_option("--config", config_path)->required();
    gen->add_option("--out", out_path)->required();
    gen->add_option("--n", n, "number of records")->required();
    gen->add_option("--seed", seed);
    gen->add_option("--token-range", token_range,
                    "draw condition tokens from [0, range); 0 means full vocabulary");

    auto* train = app.add_subcommand("train", "maximum-likelihood training");
    train->add_option("--config", config_path)->required();
    train->add_option("--data", data_path)->required();
    train->add_option("--out", out_path)->required();
    train->add_option("--metrics", metrics_path);

    auto* sample = app.add_subcommand("sample", "draw one noise tensor");
    sample->add_option("--model", model_path)->required();
    sample->add_option("--cond", cond_text, "comma-separated tokens")->required();
    sample->add_option("--seed", seed);
    sample->add_option("--mode", mode_text, "stochastic | deterministic");
    sample->add_option("--temperature", temperature);
    sample->add_option("--out", out_path)->required();

    auto* score = app.add_subcommand("score", "log-probability of a tensor file");
    score->add_option("--model", model_path)->required();
    score->add_option("--tensor", tensor_path)->required();
    score->add_option("--cond", cond_text)->required();

    auto* evalc = app.add_subcommand("eval", "full evaluation report");
    evalc->add_option("--model", model_path)->required();
    evalc->add_option("--data", data_path)->required();
    evalc->add_option("--report", report_path);
    evalc->add_option("--trials", trials, "causality audit trials");

    auto* pairsc = app.add_subcommand("pairs", "build preference pairs from rollouts");
    pairsc->add_option("--model", model_path)->required();
    pairsc->add_option("--conds", conds_text,
                       "conditions, ';'-separated, tokens ','-separated");
    pairsc->add_option("--n-conds", n_conds, "or: this many random conditions");
    pairsc->add_option("--rollouts", rollouts);
    pairsc->add_option("--gap", gap, "minimum score gap to keep a pair");
    pairsc->add_option("--seed", seed);
    pairsc->add_option("--out", out_path)->required();

    auto* dpo = app.add_subcommand("dpo", "preference fine-tuning");
    dpo->add_option("--model", model_path)->required();
    dpo->add_option("--pairs", pairs_path)->required();
    dpo->add_option("--out", out_path)->required();
    dpo->add_option("--mode", ft_mode, "dpo | preferred-nll");
    dpo->add_option("--beta", beta);
    dpo->add_option("--steps", steps);
    dpo->add_option("--lr", lr);
    dpo->add_option("--batch", batch);

    auto* flops = app.add_subcommand("flops", "FLOPs of one forward pass");
    flops->add_option("--config", config_path)->required();

    auto* audit = app.add_subcommand("audit", "causal-mask leak audit");
    audit->add_option("--model", model_path)->required();
    audit->add_option("--trials", trials);
    audit->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_path, n, seed, token_range);
        if (train->parsed()) return cmd_train(config_path, data_path, out_path, metrics_path);
        if (sample->parsed())
            return cmd_sample(model_path, cond_text, seed, mode_text, temperature, out_path);
        if (score->parsed()) return cmd_score(model_path, tensor_path, cond_text);
        if (evalc->parsed()) return cmd_eval(model_path, data_path, report_path, trials);
        if (pairsc->parsed())
            return cmd_pairs(model_path, conds_text, n_conds, rollouts, gap, seed, out_path);
        if (dpo->parsed())
            return cmd_dpo(model_path, pairs_path, out_path, ft_mode, beta, steps, lr, batch);
        if (flops->parsed()) return cmd_flops(config_path);
        if (audit->parsed()) return cmd_audit(model_path, trials, seed);
    } catch (const invalid_input& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const numerical_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
    return 2;
}
