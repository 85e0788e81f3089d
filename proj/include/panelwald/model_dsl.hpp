#pragma once

// Model description language: a lavaan-style text format for panel SEMs.
//
//   WFX1 =~ 1*x1            latent definition (loading; `1*` fixes it)
//   WFX2 ~ WFX1 + WFY1      regressions
//   WFX2 ~~ WFY2            (residual) covariance, canonicalized lhs < rhs
//   x1 ~~ 0*x1              fixed (residual) variance
//   xb1 ~~ ex*xb1           shared label => equality constraint
//   x1 ~ 1                  intercept (parsed, mean structure is saturated)
//   @wave: agree08=1        wave override for names without a trailing integer
//
// Every variable without an explicit variance statement receives a free
// (residual) variance.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "panelwald/errors.hpp"

namespace panelwald {

enum class Op { Loading, Regression, Covariance, Intercept };

inline std::string_view op_symbol(Op op) {
    switch (op) {
        case Op::Loading: return "=~";
        case Op::Regression: return "~";
        case Op::Covariance: return "~~";
        case Op::Intercept: return "~1";
    }
    return "?";
}

inline std::optional<Op> op_from_symbol(std::string_view s) {
    if (s == "=~") return Op::Loading;
    if (s == "~") return Op::Regression;
    if (s == "~~") return Op::Covariance;
    if (s == "~1") return Op::Intercept;
    return std::nullopt;
}

struct ModelSource {
    std::string text;
    std::string name;
};

struct ParameterSpec {
    std::string lhs;
    Op op = Op::Regression;
    std::string rhs;  // empty for intercepts
    bool free = true;
    double value = 0.0;  // meaningful when !free
    std::optional<std::string> label;
    int line = 0;
    int col = 0;

    static ParameterSpec make(std::string lhs, Op op, std::string rhs, bool free = true, double value = 0.0) {
        ParameterSpec p;
        p.lhs = std::move(lhs);
        p.op = op;
        p.rhs = std::move(rhs);
        p.free = free;
        p.value = free ? 0.0 : value;
        p.canonicalize();
        return p;
    }

    void canonicalize() {
        if (op == Op::Covariance && rhs < lhs) std::swap(lhs, rhs);
    }

    std::string key() const {
        if (op == Op::Intercept) return lhs + "~1";
        return lhs + std::string(op_symbol(op)) + rhs;
    }

    bool is_variance() const { return op == Op::Covariance && lhs == rhs; }

    bool same_status(const ParameterSpec& o) const {
        if (free != o.free) return false;
        if (!free && value != o.value) return false;
        return label == o.label;
    }

    friend bool operator==(const ParameterSpec& a, const ParameterSpec& b) {
        return a.lhs == b.lhs && a.op == b.op && a.rhs == b.rhs && a.same_status(b);
    }

    friend bool operator<(const ParameterSpec& a, const ParameterSpec& b) {
        return std::tie(a.lhs, a.op, a.rhs) < std::tie(b.lhs, b.op, b.rhs);
    }
};

enum class Role { WithinFactor, BetweenFactor, Indicator, Exogenous };

inline std::string_view role_name(Role r) {
    switch (r) {
        case Role::WithinFactor: return "WithinFactor";
        case Role::BetweenFactor: return "BetweenFactor";
        case Role::Indicator: return "Indicator";
        case Role::Exogenous: return "Exogenous";
    }
    return "?";
}

struct VariableCatalog {
    std::vector<std::string> observed;  // wave-major order
    std::vector<std::string> latent;    // order of first appearance
    std::map<std::string, int> wave_of;
    std::map<std::string, Role> role_of;

    bool is_latent(const std::string& v) const { return std::find(latent.begin(), latent.end(), v) != latent.end(); }
    bool is_observed(const std::string& v) const {
        return std::find(observed.begin(), observed.end(), v) != observed.end();
    }
    std::optional<int> wave(const std::string& v) const {
        auto it = wave_of.find(v);
        if (it == wave_of.end()) return std::nullopt;
        return it->second;
    }
    Role role(const std::string& v) const { return role_of.at(v); }

    friend bool operator==(const VariableCatalog&, const VariableCatalog&) = default;
};

struct ModelSpec {
    std::string name;
    std::vector<ParameterSpec> params;
    VariableCatalog vars;
    std::map<std::string, int> wave_overrides;

    std::optional<std::size_t> find(const std::string& key) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].key() == key) return i;
        return std::nullopt;
    }
    bool has(const std::string& key) const { return find(key).has_value(); }
    bool is_free(const std::string& key) const {
        auto i = find(key);
        return i && params[*i].free;
    }
    std::size_t free_count() const;  // distinct free parameters (shared labels count once)
};

namespace detail {

inline std::optional<int> trailing_integer(const std::string& name) {
    std::size_t end = name.size();
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(name[begin - 1]))) --begin;
    if (begin == end || begin == 0) return std::nullopt;
    int v = 0;
    std::from_chars(name.data() + begin, name.data() + end, v);
    return v;
}

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest representation that round-trips.
    for (int prec = 1; prec <= 17; ++prec) {
        char tmp[64];
        std::snprintf(tmp, sizeof tmp, "%.*g", prec, v);
        if (std::strtod(tmp, nullptr) == v) return tmp;
    }
    return buf;
}

}  // namespace detail

inline std::size_t ModelSpec::free_count() const {
    std::set<std::string> ids;
    for (const auto& p : params) {
        if (!p.free || p.op == Op::Intercept) continue;
        ids.insert(p.label ? "@" + *p.label : p.key());
    }
    return ids.size();
}

/// Rebuilds the variable catalog from the parameter list.
inline VariableCatalog build_catalog(const std::vector<ParameterSpec>& params,
                                     const std::map<std::string, int>& wave_overrides) {
    VariableCatalog cat;
    std::vector<std::string> order;
    std::set<std::string> seen;
    std::set<std::string> latent_set;
    auto note = [&](const std::string& v) {
        if (!v.empty() && seen.insert(v).second) order.push_back(v);
    };
    for (const auto& p : params) {
        note(p.lhs);
        note(p.rhs);
        if (p.op == Op::Loading) latent_set.insert(p.lhs);
    }

    auto wave_from_name = [&](const std::string& v) -> std::optional<int> {
        if (auto it = wave_overrides.find(v); it != wave_overrides.end()) return it->second;
        return detail::trailing_integer(v);
    };

    std::vector<std::string> observed;
    for (const auto& v : order) {
        if (latent_set.count(v)) {
            cat.latent.push_back(v);
        } else {
            observed.push_back(v);
            if (auto w = wave_from_name(v)) cat.wave_of[v] = *w;
        }
    }
    std::stable_sort(observed.begin(), observed.end(), [&](const std::string& a, const std::string& b) {
        auto wa = cat.wave_of.find(a), wb = cat.wave_of.find(b);
        bool ha = wa != cat.wave_of.end(), hb = wb != cat.wave_of.end();
        if (ha != hb) return ha;  // unwaved variables go last
        if (!ha) return false;
        return wa->second < wb->second;
    });
    cat.observed = observed;

    // Indicators per latent.
    std::map<std::string, std::vector<std::string>> indicators;
    std::set<std::string> loaded_observed;
    for (const auto& p : params) {
        if (p.op != Op::Loading) continue;
        indicators[p.lhs].push_back(p.rhs);
        if (!latent_set.count(p.rhs)) loaded_observed.insert(p.rhs);
    }
    for (const auto& v : cat.observed) cat.role_of[v] = loaded_observed.count(v) ? Role::Indicator : Role::Exogenous;

    for (const auto& lv : cat.latent) {
        std::set<int> waves;
        bool has_observed = false;
        for (const auto& ind : indicators[lv]) {
            if (latent_set.count(ind)) continue;
            has_observed = true;
            if (auto it = cat.wave_of.find(ind); it != cat.wave_of.end()) waves.insert(it->second);
        }
        cat.role_of[lv] = (has_observed && waves.size() >= 2) ? Role::BetweenFactor : Role::WithinFactor;
        if (auto w = wave_from_name(lv)) {
            cat.wave_of[lv] = *w;
        } else if (waves.size() == 1) {
            cat.wave_of[lv] = *waves.begin();
        }
    }
    // Higher-order factors measured only by between factors are between factors too.
    for (bool changed = true; changed;) {
        changed = false;
        for (const auto& lv : cat.latent) {
            if (cat.role_of[lv] == Role::BetweenFactor) continue;
            const auto& inds = indicators[lv];
            if (inds.empty()) continue;
            bool all_between = std::all_of(inds.begin(), inds.end(), [&](const std::string& i) {
                return latent_set.count(i) && cat.role_of[i] == Role::BetweenFactor;
            });
            if (all_between) {
                cat.role_of[lv] = Role::BetweenFactor;
                cat.wave_of.erase(lv);
                changed = true;
            }
        }
    }
    for (const auto& lv : cat.latent)
        if (cat.role_of[lv] == Role::BetweenFactor) cat.wave_of.erase(lv);
    return cat;
}

namespace detail {

enum class TokKind { Ident, Number, Op, Star, Plus, End };

struct Token {
    TokKind kind;
    std::string text;
    int col;
};

inline std::vector<Token> tokenize(std::string_view line, int line_no) {
    std::vector<Token> out;
    std::size_t i = 0;
    auto is_ident_start = [](char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; };
    auto is_ident_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; };
    while (i < line.size()) {
        char c = line[i];
        int col = static_cast<int>(i) + 1;
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else if (c == '=' && i + 1 < line.size() && line[i + 1] == '~') {
            out.push_back({TokKind::Op, "=~", col});
            i += 2;
        } else if (c == '~') {
            if (i + 1 < line.size() && line[i + 1] == '~') {
                out.push_back({TokKind::Op, "~~", col});
                i += 2;
            } else {
                out.push_back({TokKind::Op, "~", col});
                ++i;
            }
        } else if (c == '*') {
            out.push_back({TokKind::Star, "*", col});
            ++i;
        } else if (c == '+') {
            out.push_back({TokKind::Plus, "+", col});
            ++i;
        } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' ||
                   (c == '.' && i + 1 < line.size() && std::isdigit(static_cast<unsigned char>(line[i + 1])))) {
            std::size_t j = i + 1;
            while (j < line.size() && (std::isdigit(static_cast<unsigned char>(line[j])) || line[j] == '.' ||
                                       line[j] == 'e' || line[j] == 'E' ||
                                       ((line[j] == '-' || line[j] == '+') && (line[j - 1] == 'e' || line[j - 1] == 'E'))))
                ++j;
            std::string text(line.substr(i, j - i));
            char* endp = nullptr;
            std::strtod(text.c_str(), &endp);
            if (text == "-" || endp != text.c_str() + text.size()) throw SyntaxError(line_no, col, "malformed number '" + text + "'");
            out.push_back({TokKind::Number, text, col});
            i = j;
        } else if (is_ident_start(c)) {
            std::size_t j = i + 1;
            while (j < line.size() && is_ident_char(line[j])) ++j;
            out.push_back({TokKind::Ident, std::string(line.substr(i, j - i)), col});
            i = j;
        } else {
            throw SyntaxError(line_no, col, std::string("unexpected character '") + c + "'");
        }
    }
    out.push_back({TokKind::End, "", static_cast<int>(line.size()) + 1});
    return out;
}

inline void parse_wave_block(std::string_view body, int line_no, int col0, std::map<std::string, int>& overrides) {
    std::string s(body);
    for (char& c : s)
        if (c == ',') c = ' ';
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        if (i >= s.size()) break;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        std::string item = s.substr(i, j - i);
        auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == item.size())
            throw SyntaxError(line_no, col0 + static_cast<int>(i), "expected name=wave in @wave block");
        int w = 0;
        auto [ptr, ec] = std::from_chars(item.data() + eq + 1, item.data() + item.size(), w);
        if (ec != std::errc() || ptr != item.data() + item.size() || w < 1)
            throw SyntaxError(line_no, col0 + static_cast<int>(i + eq + 1), "wave index must be an integer >= 1");
        overrides[item.substr(0, eq)] = w;
        i = j;
    }
}

}  // namespace detail

/// Adds `p` to `params`; a second statement for the same (canonical) parameter is an error.
inline void add_parameter(std::vector<ParameterSpec>& params, ParameterSpec p) {
    p.canonicalize();
    for (const auto& q : params)
        if (q.key() == p.key()) throw DuplicateParameter(p.key());
    params.push_back(std::move(p));
}

/// Appends a free variance for every variable that has no variance statement.
inline void add_default_variances(std::vector<ParameterSpec>& params, const VariableCatalog& cat) {
    std::set<std::string> have;
    for (const auto& p : params)
        if (p.is_variance()) have.insert(p.lhs);
    auto add = [&](const std::string& v) {
        if (!have.count(v)) params.push_back(ParameterSpec::make(v, Op::Covariance, v));
    };
    for (const auto& v : cat.observed) add(v);
    for (const auto& v : cat.latent) add(v);
}

inline ModelSpec make_spec(std::string name, std::vector<ParameterSpec> params, std::map<std::string, int> waves = {}) {
    ModelSpec spec;
    spec.name = std::move(name);
    spec.wave_overrides = std::move(waves);
    spec.vars = build_catalog(params, spec.wave_overrides);
    add_default_variances(params, spec.vars);
    spec.params = std::move(params);
    return spec;
}

inline ModelSpec parse_model(const ModelSource& src) {
    std::vector<ParameterSpec> params;
    std::map<std::string, int> overrides;
    int line_no = 0;
    std::size_t pos = 0;
    bool any = false;
    const std::string& text = src.text;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string_view line(text.data() + pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        std::size_t first = line.find_first_not_of(" \t");
        if (first == std::string_view::npos) continue;
        any = true;
        if (line.substr(first).rfind("@wave:", 0) == 0) {
            detail::parse_wave_block(line.substr(first + 6), line_no, static_cast<int>(first + 7), overrides);
            continue;
        }
        auto toks = detail::tokenize(line, line_no);
        std::size_t t = 0;
        if (toks[t].kind != detail::TokKind::Ident)
            throw SyntaxError(line_no, toks[t].col, "expected a variable name at start of statement");
        std::string lhs = toks[t].text;
        ++t;
        if (toks[t].kind != detail::TokKind::Op)
            throw SyntaxError(line_no, toks[t].col, "expected one of =~, ~, ~~ after '" + lhs + "'");
        const Op op = *op_from_symbol(toks[t].text);
        ++t;
        for (;;) {
            // term := [modifier '*'] name | [modifier '*'] 1 (intercept)
            std::optional<detail::Token> modifier;
            if (toks[t + 0].kind != detail::TokKind::End && toks[t + 1].kind == detail::TokKind::Star) {
                modifier = toks[t];
                if (modifier->kind != detail::TokKind::Number && modifier->kind != detail::TokKind::Ident)
                    throw SyntaxError(line_no, modifier->col, "modifier must be a number or a label");
                t += 2;
            }
            const auto& term = toks[t];
            ParameterSpec p;
            p.lhs = lhs;
            p.line = line_no;
            p.col = term.col;
            if (term.kind == detail::TokKind::Ident) {
                p.op = op;
                p.rhs = term.text;
            } else if (term.kind == detail::TokKind::Number && op == Op::Regression && term.text == "1") {
                p.op = Op::Intercept;
            } else if (term.kind == detail::TokKind::End) {
                throw SyntaxError(line_no, term.col, "dangling operator: missing right-hand side term");
            } else {
                throw SyntaxError(line_no, term.col, "expected a variable name, got '" + term.text + "'");
            }
            if (p.op != Op::Intercept && p.rhs == lhs && p.op != Op::Covariance)
                throw SyntaxError(line_no, term.col, "variable '" + lhs + "' cannot load on or regress on itself");
            if (modifier) {
                if (modifier->kind == detail::TokKind::Number) {
                    p.free = false;
                    p.value = std::strtod(modifier->text.c_str(), nullptr);
                } else if (modifier->text == "NA") {
                    p.free = true;
                } else {
                    p.free = true;
                    p.label = modifier->text;
                }
            }
            add_parameter(params, std::move(p));
            ++t;
            if (toks[t].kind == detail::TokKind::End) break;
            if (toks[t].kind != detail::TokKind::Plus)
                throw SyntaxError(line_no, toks[t].col, "expected '+' or end of statement, got '" + toks[t].text + "'");
            ++t;
            if (toks[t].kind == detail::TokKind::End) throw SyntaxError(line_no, toks[t].col, "dangling '+'");
        }
    }
    if (!any || params.empty()) throw SyntaxError(1, 1, "model is empty after removing comments");
    return make_spec(src.name, std::move(params), std::move(overrides));
}

inline ModelSpec parse_model(std::string text, std::string name = "model") {
    return parse_model(ModelSource{std::move(text), std::move(name)});
}

/// Canonical printer: one statement per parameter; parse(print(s)) reproduces s.
inline std::string print_model(const ModelSpec& spec) {
    std::string out;
    if (!spec.wave_overrides.empty()) {
        out += "@wave:";
        for (const auto& [name, w] : spec.wave_overrides) out += " " + name + "=" + std::to_string(w);
        out += "\n";
    }
    for (const auto& p : spec.params) {
        std::string mod;
        if (!p.free)
            mod = detail::format_number(p.value) + "*";
        else if (p.label)
            mod = *p.label + "*";
        if (p.op == Op::Intercept) {
            out += p.lhs + " ~ " + mod + "1\n";
        } else {
            out += p.lhs + " " + std::string(op_symbol(p.op)) + " " + mod + p.rhs + "\n";
        }
    }
    return out;
}

/// Returns a copy of `spec` with `candidate` added (or switched) to a free parameter.
inline ModelSpec with_free(const ModelSpec& spec, const ParameterSpec& candidate) {
    auto params = spec.params;
    ParameterSpec p = candidate;
    p.canonicalize();
    p.free = true;
    p.value = 0.0;
    p.label.reset();
    bool replaced = false;
    for (auto& q : params) {
        if (q.key() == p.key()) {
            q = p;
            replaced = true;
        }
    }
    if (!replaced) params.push_back(p);
    ModelSpec out = spec;
    out.params = std::move(params);
    out.vars = build_catalog(out.params, out.wave_overrides);
    return out;
}

namespace detail {

/// RAM cell identity of a non-variance parameter: (matrix, row-var, col-var).
inline std::tuple<char, std::string, std::string> cell_of(const ParameterSpec& p) {
    switch (p.op) {
        case Op::Loading: return {'A', p.rhs, p.lhs};
        case Op::Regression: return {'A', p.lhs, p.rhs};
        case Op::Covariance: return {'S', std::min(p.lhs, p.rhs), std::max(p.lhs, p.rhs)};
        case Op::Intercept: return {'M', p.lhs, ""};
    }
    return {'?', "", ""};
}

}  // namespace detail

/// True when every loading onto `latent` is fixed.
inline bool loadings_fixed(const ModelSpec& spec, const std::string& latent) {
    for (const auto& p : spec.params)
        if (p.op == Op::Loading && p.lhs == latent && p.free) return false;
    return true;
}

/// The universe of fixed-to-zero parameters an LM scan may test.
inline std::vector<ParameterSpec> enumerate_candidates(const ModelSpec& spec) {
    const auto& cat = spec.vars;
    std::vector<std::string> universe;
    for (const auto& v : cat.observed) universe.push_back(v);
    for (const auto& v : cat.latent) {
        if (cat.role(v) == Role::BetweenFactor && loadings_fixed(spec, v)) continue;
        universe.push_back(v);
    }

    std::set<std::tuple<char, std::string, std::string>> occupied;
    for (const auto& p : spec.params) {
        if (p.free || p.value != 0.0) occupied.insert(detail::cell_of(p));
    }

    std::vector<ParameterSpec> out;
    auto consider = [&](ParameterSpec p) {
        p.free = false;
        p.value = 0.0;
        if (occupied.count(detail::cell_of(p))) return;
        out.push_back(std::move(p));
    };
    for (std::size_t i = 0; i < universe.size(); ++i) {
        for (std::size_t j = 0; j < universe.size(); ++j) {
            if (i == j) continue;
            const auto& a = universe[i];
            const auto& b = universe[j];
            if (a < b) consider(ParameterSpec::make(a, Op::Covariance, b, false, 0.0));
            const bool a_obs = cat.is_observed(a);
            const bool b_lat = cat.is_latent(b);
            if (a_obs && b_lat)
                consider(ParameterSpec::make(b, Op::Loading, a, false, 0.0));  // a ~ b is the cross-loading b =~ a
            else
                consider(ParameterSpec::make(a, Op::Regression, b, false, 0.0));
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end(),
                          [](const ParameterSpec& x, const ParameterSpec& y) { return x.key() == y.key(); }),
              out.end());
    return out;
}

}  // namespace panelwald
