// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rank1lab/errors.hpp"
#include "rank1lab/rng.hpp"

namespace rank1lab::tasks {

// ---------------------------------------------------------------------------
// Token codec. The task owns the vocabulary: digits, operators, delimiters,
// and the specials PAD/BOS/EOS. Everything is single-character except the
// specials.
// ---------------------------------------------------------------------------
namespace codec {

constexpr int PAD = 0;
constexpr int BOS = 1;
constexpr int EOS = 2;

constexpr int vocab_floor = 22; // ids 0..21 are meaningful

int char_to_id(char c);            // -1 for unmapped characters
char id_to_char(int id);           // '\0' for specials/unknown
std::vector<int> encode(const std::string& text);
std::string decode(std::span<const int> tokens); // stops at EOS, skips specials

} // namespace codec

struct CountdownInstance {
    std::vector<int64_t> numbers; // 3-4 (configurable) positive integers
    int64_t target = 0;
    int64_t id = 0;
};

struct RewardConfig {
    int l_max = 32;
    int l_cache = 8;
    bool enable_overlong = false;
    double format_bonus = 0.0;
};

enum class Grammar { Infix, Postfix };

struct GenConfig {
    uint64_t seed = 1;
    int64_t size = 1000;
    int k_min = 3, k_max = 4;
    int64_t num_min = 1, num_max = 20;
    int64_t target_min = 1, target_max = 99;
    int retry_cap = 64;
};

// Exhaustive integer expression search over +,-,*,/ (exact division only),
// combining every pair in every order. Returns a witness infix expression
// when the target is reachable using all numbers exactly once.
std::optional<std::string> solve(std::span<const int64_t> numbers, int64_t target);

// All values reachable using every number exactly once.
std::vector<int64_t> reachable_values(std::span<const int64_t> numbers);

// Solvability is established during generation; deterministic per seed.
std::vector<CountdownInstance> generate_dataset(const GenConfig& cfg);

// Exact verification: tokens parse as an arithmetic expression, use the
// instance numbers exactly once (multiset equality), every division is exact,
// and the value equals the target. Malformed input is false, never a throw.
bool verify(const CountdownInstance& inst, std::span<const int> response_tokens,
            Grammar grammar = Grammar::Infix);

// Well-formedness alone (grammar + exact arithmetic), ignoring the number
// multiset and target.
bool well_formed(std::span<const int> response_tokens, Grammar grammar = Grammar::Infix);

// What the format bonus pays for, as a fraction of format_bonus:
//   0.5                       expression parse combining two or more literals
//   + 0.5 * multiset overlap  |literals n instance numbers| / max(k, #literals)
// so an exact number multiset scores 1.0 and every matching literal is worth
// credit on its own. Bare literals earn nothing (they are a degenerate
// attractor), and the graded credit keeps early rollout groups informative
// at desk scale; the value itself is only rewarded through R_task.
double format_score(const CountdownInstance& inst, std::span<const int> response_tokens,
                    Grammar grammar = Grammar::Infix);

// R_task + optional format bonus + optional overlong shaping R_len. The
// response length |y| is the token count as given (EOS included when present).
double reward(const CountdownInstance& inst, std::span<const int> response_tokens,
              const RewardConfig& cfg, Grammar grammar = Grammar::Infix);

// The piecewise length penalty on its own: 0 below the soft cap, a linear
// ramp to -1 at the hard cap, -1 beyond.
double overlong_penalty(int length, const RewardConfig& cfg);

// Last test_size instances form the test split.
std::pair<std::vector<CountdownInstance>, std::vector<CountdownInstance>> split(
    const std::vector<CountdownInstance>& dataset, int64_t test_size);

// Unbiased estimator 1 - C(n-c, k)/C(n, k), overflow-safe.
double pass_at_k(int64_t n, int64_t c, int64_t k);

// Prompt rendering: "target:n1,n2[,n3]=" with a leading BOS.
std::vector<int> render_prompt(const CountdownInstance& inst);

// JSON-lines dataset io: one {"id","numbers","target"} object per line.
void save_dataset(const std::vector<CountdownInstance>& ds, const std::string& path);
std::vector<CountdownInstance> load_dataset(const std::string& path);

} // namespace rank1lab::tasks
