#pragma once

// Compute budgeting: C = 6*N*B*S with a tunable frozen-parameter cost.
// The frozen factor is kept as an exact rational so the two scenarios of
// interest (2/3 for update-skipping, 0 for offloaded random projections)
// stay in integer arithmetic.

#include <cstdint>
#include <stdexcept>

namespace slw {

struct FrozenCost {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    static FrozenCost real() { return {2, 3}; }   // update step skipped
    static FrozenCost ideal() { return {0, 1}; }  // free random parameters
};

struct BudgetInputs {
    std::uint64_t n_trainable = 0;  // non-embedding trainable count
    std::uint64_t n_frozen = 0;
    std::uint64_t tokens_per_batch = 0;  // sequences x context
    std::uint64_t steps = 0;             // parameter updates
    FrozenCost frozen_cost = FrozenCost::real();
};

struct Budget {
    std::uint64_t flop = 0;
    double pf_days = 0.0;
};

inline double pf_days(double flop) {
    if (flop < 0) throw std::invalid_argument("pf_days: negative FLOP");
    return flop / 8.64e19;
}

inline Budget compute_budget(const BudgetInputs& in) {
    if (in.frozen_cost.den == 0) throw std::invalid_argument("compute_budget: zero denominator");
    if (in.frozen_cost.num > in.frozen_cost.den)
        throw std::invalid_argument("compute_budget: frozen cost factor must lie in [0, 1]");
    using u128 = unsigned __int128;
    const u128 bs = static_cast<u128>(in.tokens_per_batch) * in.steps;
    const u128 train_term = static_cast<u128>(6) * in.n_trainable * bs;
    const u128 frozen_term =
        static_cast<u128>(6) * in.frozen_cost.num * in.n_frozen * bs / in.frozen_cost.den;
    const u128 total = train_term + frozen_term;
    if (total > static_cast<u128>(UINT64_MAX))
        throw std::overflow_error("compute_budget: FLOP count exceeds 64 bits");
    Budget b;
    b.flop = static_cast<std::uint64_t>(total);
    b.pf_days = pf_days(static_cast<double>(b.flop));
    return b;
}

}  // namespace slw
