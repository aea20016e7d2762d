// SPDX-License-Identifier: Apache-2.0
//
// Run-config file handling: every field optional with documented defaults,
// unknown keys rejected so typos never silently change an experiment.
#pragma once

#include <json.hpp>

#include "rank1lab/rlvr.hpp"

namespace rank1lab::config {

using nlohmann::json;

namespace detail {

inline void expect_keys(const json& obj, std::initializer_list<const char*> allowed,
                        const std::string& context) {
    for (auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + context);
    }
}

template <typename T>
void get_if(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

} // namespace detail

inline rlvr::Algo algo_from_string(const std::string& s) {
    if (s == "grpo") return rlvr::Algo::GRPO;
    if (s == "dapo") return rlvr::Algo::DAPO;
    if (s == "gspo") return rlvr::Algo::GSPO;
    throw ConfigError("unknown algo: " + s);
}
inline const char* algo_to_string(rlvr::Algo a) {
    switch (a) {
        case rlvr::Algo::GRPO: return "grpo";
        case rlvr::Algo::DAPO: return "dapo";
        default: return "gspo";
    }
}

inline rlvr::TrainMode mode_from_string(const std::string& s) {
    if (s == "full") return rlvr::TrainMode::Full;
    if (s == "periodic-rank1") return rlvr::TrainMode::PeriodicRank1;
    if (s == "lora") return rlvr::TrainMode::Lora;
    throw ConfigError("unknown mode: " + s);
}
inline const char* mode_to_string(rlvr::TrainMode m) {
    switch (m) {
        case rlvr::TrainMode::Full: return "full";
        case rlvr::TrainMode::PeriodicRank1: return "periodic-rank1";
        default: return "lora";
    }
}

inline rlvr::RunConfig run_config_from_json(const json& j) {
    detail::expect_keys(j,
                        {"task", "model", "algo", "schedule", "mode", "lora", "out_dir",
                         "run_id", "seed", "threads", "fp64"},
                        "run config");
    rlvr::RunConfig rc;

    if (j.contains("task")) {
        const auto& t = j.at("task");
        detail::expect_keys(t,
                            {"seed", "size", "k_range", "num_range", "target_range",
                             "test_size", "format_bonus", "overlong", "grammar",
                             "dataset_file"},
                            "task");
        detail::get_if(t, "seed", rc.task.gen.seed);
        detail::get_if(t, "size", rc.task.gen.size);
        if (t.contains("k_range")) {
            auto v = t.at("k_range").get<std::vector<int>>();
            if (v.size() != 2) throw ConfigError("k_range must be [min, max]");
            rc.task.gen.k_min = v[0];
            rc.task.gen.k_max = v[1];
        }
        if (t.contains("num_range")) {
            auto v = t.at("num_range").get<std::vector<int64_t>>();
            if (v.size() != 2) throw ConfigError("num_range must be [min, max]");
            rc.task.gen.num_min = v[0];
            rc.task.gen.num_max = v[1];
        }
        if (t.contains("target_range")) {
            auto v = t.at("target_range").get<std::vector<int64_t>>();
            if (v.size() != 2) throw ConfigError("target_range must be [min, max]");
            rc.task.gen.target_min = v[0];
            rc.task.gen.target_max = v[1];
        }
        detail::get_if(t, "test_size", rc.task.test_size);
        detail::get_if(t, "format_bonus", rc.task.reward.format_bonus);
        if (t.contains("overlong")) {
            const auto& o = t.at("overlong");
            detail::expect_keys(o, {"enable", "l_max", "l_cache"}, "task.overlong");
            detail::get_if(o, "enable", rc.task.reward.enable_overlong);
            detail::get_if(o, "l_max", rc.task.reward.l_max);
            detail::get_if(o, "l_cache", rc.task.reward.l_cache);
        }
        if (t.contains("grammar")) {
            const auto g = t.at("grammar").get<std::string>();
            if (g == "infix")
                rc.task.grammar = tasks::Grammar::Infix;
            else if (g == "postfix")
                rc.task.grammar = tasks::Grammar::Postfix;
            else
                throw ConfigError("grammar must be infix or postfix");
        }
        detail::get_if(t, "dataset_file", rc.task.dataset_file);
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::expect_keys(m,
                            {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                             "max_seq_len", "norm_type", "tied_head", "seed"},
                            "model");
        detail::get_if(m, "vocab_size", rc.model.vocab_size);
        detail::get_if(m, "d_model", rc.model.d_model);
        detail::get_if(m, "n_layers", rc.model.n_layers);
        detail::get_if(m, "n_heads", rc.model.n_heads);
        detail::get_if(m, "d_ff", rc.model.d_ff);
        detail::get_if(m, "max_seq_len", rc.model.max_seq_len);
        detail::get_if(m, "norm_type", rc.model.norm_type);
        detail::get_if(m, "tied_head", rc.model.tied_head);
        detail::get_if(m, "seed", rc.model.seed);
    }

    if (j.contains("algo")) {
        const auto& a = j.at("algo");
        detail::expect_keys(
            a, {"algo",          "eps",           "eps_low",
                "eps_high",      "beta",          "group_size",
                "dynamic_sampling", "aggregation", "lr",
                "adam_beta1",    "adam_beta2",    "adam_eps",
                "weight_decay",  "grad_clip",     "substitution_period",
                "substitution_rescale", "reset_moments_on_substitution", "ref_policy",
                "temperature",   "top_p",         "max_new_tokens",
                "greedy_rollout", "inner_epochs"},
            "algo");
        if (a.contains("algo")) rc.algo.algo = algo_from_string(a.at("algo").get<std::string>());
        detail::get_if(a, "eps", rc.algo.eps);
        detail::get_if(a, "eps_low", rc.algo.eps_low);
        detail::get_if(a, "eps_high", rc.algo.eps_high);
        detail::get_if(a, "beta", rc.algo.beta);
        detail::get_if(a, "group_size", rc.algo.group_size);
        detail::get_if(a, "dynamic_sampling", rc.algo.dynamic_sampling);
        if (a.contains("aggregation")) {
            const auto s = a.at("aggregation").get<std::string>();
            if (s == "auto")
                rc.algo.aggregation = rlvr::Aggregation::Auto;
            else if (s == "sample-mean")
                rc.algo.aggregation = rlvr::Aggregation::SampleMean;
            else if (s == "token-mean")
                rc.algo.aggregation = rlvr::Aggregation::TokenMean;
            else
                throw ConfigError("aggregation must be auto, sample-mean or token-mean");
        }
        detail::get_if(a, "lr", rc.algo.lr);
        detail::get_if(a, "adam_beta1", rc.algo.adam_beta1);
        detail::get_if(a, "adam_beta2", rc.algo.adam_beta2);
        detail::get_if(a, "adam_eps", rc.algo.adam_eps);
        detail::get_if(a, "weight_decay", rc.algo.weight_decay);
        detail::get_if(a, "grad_clip", rc.algo.grad_clip);
        detail::get_if(a, "substitution_period", rc.algo.substitution_period);
        detail::get_if(a, "substitution_rescale", rc.algo.substitution_rescale);
        detail::get_if(a, "reset_moments_on_substitution",
                       rc.algo.reset_moments_on_substitution);
        if (a.contains("ref_policy")) {
            const auto s = a.at("ref_policy").get<std::string>();
            if (s == "base")
                rc.algo.ref_policy = rlvr::RefPolicy::Base;
            else if (s == "post-substitution")
                rc.algo.ref_policy = rlvr::RefPolicy::PostSubstitution;
            else
                throw ConfigError("ref_policy must be base or post-substitution");
        }
        detail::get_if(a, "temperature", rc.algo.temperature);
        detail::get_if(a, "top_p", rc.algo.top_p);
        detail::get_if(a, "max_new_tokens", rc.algo.max_new_tokens);
        detail::get_if(a, "greedy_rollout", rc.algo.greedy_rollout);
        detail::get_if(a, "inner_epochs", rc.algo.inner_epochs);
    }

    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::expect_keys(s,
                            {"steps", "eval_interval", "snapshot_interval", "batch_prompts",
                             "resample_cap_mult", "eval_samples", "eval_pass_at_k"},
                            "schedule");
        detail::get_if(s, "steps", rc.schedule.steps);
        detail::get_if(s, "eval_interval", rc.schedule.eval_interval);
        detail::get_if(s, "snapshot_interval", rc.schedule.snapshot_interval);
        detail::get_if(s, "batch_prompts", rc.schedule.batch_prompts);
        detail::get_if(s, "resample_cap_mult", rc.schedule.resample_cap_mult);
        detail::get_if(s, "eval_samples", rc.schedule.eval_samples);
        detail::get_if(s, "eval_pass_at_k", rc.schedule.eval_pass_at_k);
    }

    if (j.contains("mode")) rc.mode = mode_from_string(j.at("mode").get<std::string>());

    if (j.contains("lora")) {
        const auto& l = j.at("lora");
        detail::expect_keys(l, {"r", "alpha", "targets"}, "lora");
        detail::get_if(l, "r", rc.lora.r);
        detail::get_if(l, "alpha", rc.lora.alpha);
        detail::get_if(l, "targets", rc.lora.targets);
    }

    detail::get_if(j, "out_dir", rc.out_dir);
    detail::get_if(j, "run_id", rc.run_id);
    detail::get_if(j, "seed", rc.seed);
    detail::get_if(j, "threads", rc.threads);
    detail::get_if(j, "fp64", rc.fp64);
    return rc;
}

inline json run_config_to_json(const rlvr::RunConfig& rc) {
    json j;
    j["task"] = {{"seed", rc.task.gen.seed},
                 {"size", rc.task.gen.size},
                 {"k_range", {rc.task.gen.k_min, rc.task.gen.k_max}},
                 {"num_range", {rc.task.gen.num_min, rc.task.gen.num_max}},
                 {"target_range", {rc.task.gen.target_min, rc.task.gen.target_max}},
                 {"test_size", rc.task.test_size},
                 {"format_bonus", rc.task.reward.format_bonus},
                 {"overlong",
                  {{"enable", rc.task.reward.enable_overlong},
                   {"l_max", rc.task.reward.l_max},
                   {"l_cache", rc.task.reward.l_cache}}},
                 {"grammar", rc.task.grammar == tasks::Grammar::Infix ? "infix" : "postfix"},
                 {"dataset_file", rc.task.dataset_file}};
    j["model"] = rc.model.to_json();
    const char* agg = rc.algo.aggregation == rlvr::Aggregation::Auto ? "auto"
                      : rc.algo.aggregation == rlvr::Aggregation::SampleMean ? "sample-mean"
                                                                             : "token-mean";
    j["algo"] = {{"algo", algo_to_string(rc.algo.algo)},
                 {"eps", rc.algo.eps},
                 {"eps_low", rc.algo.eps_low},
                 {"eps_high", rc.algo.eps_high},
                 {"beta", rc.algo.beta},
                 {"group_size", rc.algo.group_size},
                 {"dynamic_sampling", rc.algo.dynamic_sampling},
                 {"aggregation", agg},
                 {"lr", rc.algo.lr},
                 {"adam_beta1", rc.algo.adam_beta1},
                 {"adam_beta2", rc.algo.adam_beta2},
                 {"adam_eps", rc.algo.adam_eps},
                 {"weight_decay", rc.algo.weight_decay},
                 {"grad_clip", rc.algo.grad_clip},
                 {"substitution_period", rc.algo.substitution_period},
                 {"substitution_rescale", rc.algo.substitution_rescale},
                 {"reset_moments_on_substitution", rc.algo.reset_moments_on_substitution},
                 {"ref_policy",
                  rc.algo.ref_policy == rlvr::RefPolicy::Base ? "base" : "post-substitution"},
                 {"temperature", rc.algo.temperature},
                 {"top_p", rc.algo.top_p},
                 {"max_new_tokens", rc.algo.max_new_tokens},
                 {"greedy_rollout", rc.algo.greedy_rollout},
                 {"inner_epochs", rc.algo.inner_epochs}};
    j["schedule"] = {{"steps", rc.schedule.steps},
                     {"eval_interval", rc.schedule.eval_interval},
                     {"snapshot_interval", rc.schedule.snapshot_interval},
                     {"batch_prompts", rc.schedule.batch_prompts},
                     {"resample_cap_mult", rc.schedule.resample_cap_mult},
                     {"eval_samples", rc.schedule.eval_samples},
                     {"eval_pass_at_k", rc.schedule.eval_pass_at_k}};
    j["mode"] = mode_to_string(rc.mode);
    j["lora"] = {{"r", rc.lora.r}, {"alpha", rc.lora.alpha}, {"targets", rc.lora.targets}};
    j["out_dir"] = rc.out_dir;
    j["run_id"] = rc.run_id;
    j["seed"] = rc.seed;
    j["threads"] = rc.threads;
    j["fp64"] = rc.fp64;
    return j;
}

} // namespace rank1lab::config
