// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace rank1lab::tasks {

namespace codec {

namespace {
constexpr const char* kChars = "0123456789+-*/()=,:";
// ids: 0 PAD, 1 BOS, 2 EOS, then kChars in order starting at 3
} // namespace

int char_to_id(char c) {
    for (int i = 0; kChars[i]; ++i)
        if (kChars[i] == c) return 3 + i;
    return -1;
}

char id_to_char(int id) {
    const int n = static_cast<int>(std::string(kChars).size());
    if (id < 3 || id >= 3 + n) return '\0';
    return kChars[id - 3];
}

std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
        const int id = char_to_id(c);
        if (id < 0) throw DomainError(std::string("unencodable character: ") + c);
        out.push_back(id);
    }
    return out;
}

std::string decode(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        if (t == EOS) break;
        const char c = id_to_char(t);
        if (c != '\0') out.push_back(c);
    }
    return out;
}

} // namespace codec

// ---------------------------------------------------------------------------
// exhaustive solver
// ---------------------------------------------------------------------------
namespace {

struct Cand {
    int64_t value;
    std::string expr;
};

void combine_all(const std::vector<Cand>& items, std::vector<Cand>& results) {
    if (items.size() == 1) {
        results.push_back(items[0]);
        return;
    }
    for (size_t i = 0; i + 1 < items.size(); ++i) {
        for (size_t j = i + 1; j < items.size(); ++j) {
            std::vector<Cand> rest;
            for (size_t k = 0; k < items.size(); ++k)
                if (k != i && k != j) rest.push_back(items[k]);
            const Cand& a = items[i];
            const Cand& b = items[j];
            auto push = [&](int64_t v, const std::string& e) {
                rest.push_back({v, e});
                combine_all(rest, results);
                rest.pop_back();
            };
            push(a.value + b.value, "(" + a.expr + "+" + b.expr + ")");
            push(a.value * b.value, "(" + a.expr + "*" + b.expr + ")");
            push(a.value - b.value, "(" + a.expr + "-" + b.expr + ")");
            push(b.value - a.value, "(" + b.expr + "-" + a.expr + ")");
            if (b.value != 0 && a.value % b.value == 0)
                push(a.value / b.value, "(" + a.expr + "/" + b.expr + ")");
            if (a.value != 0 && b.value % a.value == 0)
                push(b.value / a.value, "(" + b.expr + "/" + a.expr + ")");
        }
    }
}

std::vector<Cand> all_outcomes(std::span<const int64_t> numbers) {
    std::vector<Cand> items;
    items.reserve(numbers.size());
    for (int64_t n : numbers) items.push_back({n, std::to_string(n)});
    std::vector<Cand> results;
    combine_all(items, results);
    return results;
}

} // namespace

std::optional<std::string> solve(std::span<const int64_t> numbers, int64_t target) {
    if (numbers.empty()) return std::nullopt;
    for (const Cand& c : all_outcomes(numbers))
        if (c.value == target) return c.expr;
    return std::nullopt;
}

std::vector<int64_t> reachable_values(std::span<const int64_t> numbers) {
    std::set<int64_t> seen;
    for (const Cand& c : all_outcomes(numbers)) seen.insert(c.value);
    return std::vector<int64_t>(seen.begin(), seen.end());
}

std::vector<CountdownInstance> generate_dataset(const GenConfig& cfg) {
    if (cfg.size < 0 || cfg.k_min < 2 || cfg.k_max < cfg.k_min || cfg.num_min < 1 ||
        cfg.num_max < cfg.num_min || cfg.target_min < 1 || cfg.target_max < cfg.target_min)
        throw DomainError("invalid generation config");
    std::vector<CountdownInstance> out;
    out.reserve(static_cast<size_t>(cfg.size));
    for (int64_t i = 0; i < cfg.size; ++i) {
        auto rng = RngStream::from(cfg.seed, {0x6461746173u, static_cast<uint64_t>(i)});
        bool done = false;
        for (int attempt = 0; attempt < cfg.retry_cap && !done; ++attempt) {
            const int k = static_cast<int>(rng.uniform_int(cfg.k_min, cfg.k_max));
            std::vector<int64_t> numbers(k);
            for (auto& n : numbers) n = rng.uniform_int(cfg.num_min, cfg.num_max);
            std::vector<int64_t> candidates;
            for (int64_t v : reachable_values(numbers))
                if (v >= cfg.target_min && v <= cfg.target_max) candidates.push_back(v);
            if (candidates.empty()) continue;
            const int64_t target =
                candidates[static_cast<size_t>(rng.uniform_int(0, candidates.size() - 1))];
            out.push_back({std::move(numbers), target, i});
            done = true;
        }
        if (!done)
            throw GenerationTimeout("no solvable instance within retry cap at index " +
                                    std::to_string(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// verification: recursive-descent infix parser / postfix evaluator with exact
// integer arithmetic. Literal multiset is collected during the parse.
// ---------------------------------------------------------------------------
namespace {

struct Parser {
    const std::string& s;
    size_t pos = 0;
    std::vector<int64_t> literals;
    bool ok = true;

    explicit Parser(const std::string& text) : s(text) {}

    bool done() const { return pos >= s.size(); }
    char peek() const { return pos < s.size() ? s[pos] : '\0'; }

    int64_t parse_expr() {
        int64_t v = parse_term();
        while (ok && (peek() == '+' || peek() == '-')) {
            const char op = s[pos++];
            const int64_t rhs = parse_term();
            if (!ok) return 0;
            v = op == '+' ? v + rhs : v - rhs;
        }
        return v;
    }

    int64_t parse_term() {
        int64_t v = parse_factor();
        while (ok && (peek() == '*' || peek() == '/')) {
            const char op = s[pos++];
            const int64_t rhs = parse_factor();
            if (!ok) return 0;
            if (op == '*') {
                v = v * rhs;
            } else {
                if (rhs == 0 || v % rhs != 0) {
                    ok = false; // inexact division
                    return 0;
                }
                v = v / rhs;
            }
        }
        return v;
    }

    int64_t parse_factor() {
        if (peek() == '(') {
            ++pos;
            const int64_t v = parse_expr();
            if (!ok || peek() != ')') {
                ok = false;
                return 0;
            }
            ++pos;
            return v;
        }
        if (peek() >= '0' && peek() <= '9') {
            int64_t v = 0;
            size_t digits = 0;
            while (peek() >= '0' && peek() <= '9') {
                if (digits++ > 9) { // absurd literal, bail out
                    ok = false;
                    return 0;
                }
                v = v * 10 + (s[pos++] - '0');
            }
            literals.push_back(v);
            return v;
        }
        ok = false;
        return 0;
    }
};

struct Evaluated {
    int64_t value;
    std::vector<int64_t> literals;
};

std::optional<Evaluated> evaluate_infix(const std::string& text) {
    if (text.empty()) return std::nullopt;
    Parser p(text);
    const int64_t v = p.parse_expr();
    if (!p.ok || !p.done()) return std::nullopt;
    return Evaluated{v, std::move(p.literals)};
}

std::optional<Evaluated> evaluate_postfix(const std::string& text) {
    if (text.empty()) return std::nullopt;
    std::vector<int64_t> stack;
    std::vector<int64_t> literals;
    size_t pos = 0;
    while (pos < text.size()) {
        const char c = text[pos];
        if (c >= '0' && c <= '9') {
            int64_t v = 0;
            size_t digits = 0;
            while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
                if (digits++ > 9) return std::nullopt;
                v = v * 10 + (text[pos++] - '0');
            }
            stack.push_back(v);
            literals.push_back(v);
        } else if (c == '+' || c == '-' || c == '*' || c == '/') {
            if (stack.size() < 2) return std::nullopt;
            const int64_t b = stack.back();
            stack.pop_back();
            const int64_t a = stack.back();
            stack.pop_back();
            int64_t v = 0;
            switch (c) {
                case '+': v = a + b; break;
                case '-': v = a - b; break;
                case '*': v = a * b; break;
                case '/':
                    if (b == 0 || a % b != 0) return std::nullopt;
                    v = a / b;
                    break;
            }
            stack.push_back(v);
            ++pos;
        } else if (c == ',') {
            ++pos; // optional separator between consecutive numbers
        } else {
            return std::nullopt;
        }
    }
    if (stack.size() != 1) return std::nullopt;
    return Evaluated{stack[0], std::move(literals)};
}

std::optional<Evaluated> evaluate(std::span<const int> tokens, Grammar grammar) {
    // any unmapped token (PAD, BOS, out-of-codec) invalidates the response
    std::string text;
    for (int t : tokens) {
        if (t == codec::EOS) break;
        const char c = codec::id_to_char(t);
        if (c == '\0') return std::nullopt;
        text.push_back(c);
    }
    return grammar == Grammar::Infix ? evaluate_infix(text) : evaluate_postfix(text);
}

bool multiset_equal(std::vector<int64_t> a, std::vector<int64_t> b) {
    if (a.size() != b.size()) return false;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return a == b;
}

} // namespace

bool verify(const CountdownInstance& inst, std::span<const int> response_tokens,
            Grammar grammar) {
    auto ev = evaluate(response_tokens, grammar);
    if (!ev) return false;
    if (ev->value != inst.target) return false;
    return multiset_equal(ev->literals, inst.numbers);
}

bool well_formed(std::span<const int> response_tokens, Grammar grammar) {
    return evaluate(response_tokens, grammar).has_value();
}

double format_score(const CountdownInstance& inst, std::span<const int> response_tokens,
                    Grammar grammar) {
    auto ev = evaluate(response_tokens, grammar);
    if (!ev || ev->literals.size() < 2) return 0.0;
    std::vector<int64_t> lits = ev->literals;
    std::vector<int64_t> nums = inst.numbers;
    std::sort(lits.begin(), lits.end());
    std::sort(nums.begin(), nums.end());
    size_t matched = 0, i = 0, j = 0;
    while (i < lits.size() && j < nums.size()) {
        if (lits[i] == nums[j]) {
            ++matched;
            ++i;
            ++j;
        } else if (lits[i] < nums[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const double overlap =
        static_cast<double>(matched) / static_cast<double>(std::max(lits.size(), nums.size()));
    return 0.5 + 0.5 * overlap;
}

double overlong_penalty(int length, const RewardConfig& cfg) {
    if (cfg.l_cache <= 0 || cfg.l_cache >= cfg.l_max)
        throw DomainError("require 0 < l_cache < l_max");
    const int soft = cfg.l_max - cfg.l_cache;
    if (length <= soft) return 0.0;
    if (length <= cfg.l_max)
        return static_cast<double>(soft - length) / static_cast<double>(cfg.l_cache);
    return -1.0;
}

double reward(const CountdownInstance& inst, std::span<const int> response_tokens,
              const RewardConfig& cfg, Grammar grammar) {
    double r = verify(inst, response_tokens, grammar) ? 1.0 : 0.0;
    if (cfg.format_bonus != 0.0)
        r += cfg.format_bonus * format_score(inst, response_tokens, grammar);
    if (cfg.enable_overlong)
        r += overlong_penalty(static_cast<int>(response_tokens.size()), cfg);
    return r;
}

std::pair<std::vector<CountdownInstance>, std::vector<CountdownInstance>> split(
    const std::vector<CountdownInstance>& dataset, int64_t test_size) {
    if (test_size < 0 || test_size > static_cast<int64_t>(dataset.size()))
        throw DomainError("invalid test split size");
    const size_t cut = dataset.size() - static_cast<size_t>(test_size);
    return {std::vector<CountdownInstance>(dataset.begin(), dataset.begin() + cut),
            std::vector<CountdownInstance>(dataset.begin() + cut, dataset.end())};
}

double pass_at_k(int64_t n, int64_t c, int64_t k) {
    if (n < 1 || c < 0 || c > n || k < 1 || k > n) throw DomainError("pass_at_k domain");
    if (c == 0) return 0.0;
    if (k > n - c) return 1.0; // every k-subset hits a correct sample
    // C(n-c, k)/C(n, k) as a product of ratios, each factor in (0, 1]
    double q = 1.0;
    for (int64_t i = 0; i < k; ++i)
        q *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
    return 1.0 - q;
}

std::vector<int> render_prompt(const CountdownInstance& inst) {
    std::string text = std::to_string(inst.target) + ":";
    for (size_t i = 0; i < inst.numbers.size(); ++i) {
        if (i) text += ",";
        text += std::to_string(inst.numbers[i]);
    }
    text += "=";
    std::vector<int> tokens{codec::BOS};
    for (int t : codec::encode(text)) tokens.push_back(t);
    return tokens;
}

void save_dataset(const std::vector<CountdownInstance>& ds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& inst : ds) {
        nlohmann::json j{{"id", inst.id}, {"numbers", inst.numbers}, {"target", inst.target}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

std::vector<CountdownInstance> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::vector<CountdownInstance> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IoError("bad dataset line: " + line);
        CountdownInstance inst;
        inst.id = j.at("id").get<int64_t>();
        inst.numbers = j.at("numbers").get<std::vector<int64_t>>();
        inst.target = j.at("target").get<int64_t>();
        out.push_back(std::move(inst));
    }
    return out;
}

} // namespace rank1lab::tasks
