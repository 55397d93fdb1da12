#include <gtest/gtest.h>

#include <cstdint>

#include "slw/accounting.hpp"

namespace {

TEST(Budget, DenseOnlyMatchesSixNBS) {
    slw::BudgetInputs in;
    in.n_trainable = 1234567;
    in.n_frozen = 0;
    in.tokens_per_batch = 80 * 1024;
    in.steps = 1000;
    slw::Budget b = slw::compute_budget(in);
    EXPECT_EQ(b.flop, 6ull * 1234567ull * 80ull * 1024ull * 1000ull);
}

TEST(Budget, FrozenRealCostIsFourNBS) {
    // factor 2/3 of 6 -> frozen params cost exactly 4*N*B*S
    slw::BudgetInputs in;
    in.n_trainable = 0;
    in.n_frozen = 999;
    in.tokens_per_batch = 30;
    in.steps = 7;
    in.frozen_cost = slw::FrozenCost::real();
    slw::Budget b = slw::compute_budget(in);
    EXPECT_EQ(b.flop, 4ull * 999ull * 30ull * 7ull);
}

TEST(Budget, FrozenIdealCostIsZero) {
    slw::BudgetInputs in;
    in.n_trainable = 0;
    in.n_frozen = 123456789;
    in.tokens_per_batch = 81920;
    in.steps = 100000;
    in.frozen_cost = slw::FrozenCost::ideal();
    EXPECT_EQ(slw::compute_budget(in).flop, 0ull);
}

TEST(Budget, MixedExactArithmetic) {
    slw::BudgetInputs in;
    in.n_trainable = 17;
    in.n_frozen = 5;
    in.tokens_per_batch = 9;
    in.steps = 2;
    in.frozen_cost = slw::FrozenCost::real();
    // 6*17*18 + 4*5*18 = 1836 + 360
    EXPECT_EQ(slw::compute_budget(in).flop, 2196ull);
}

TEST(Budget, LargeValuesStayExact) {
    // large run: ~100M params, 80x1024 tokens/batch, 300k steps ~ 1.5e19 FLOP
    slw::BudgetInputs in;
    in.n_trainable = 101712384;
    in.n_frozen = 0;
    in.tokens_per_batch = 80 * 1024;
    in.steps = 300000;
    slw::Budget b = slw::compute_budget(in);
    EXPECT_EQ(b.flop, 6ull * 101712384ull * (80ull * 1024ull) * 300000ull);
    EXPECT_NEAR(b.pf_days, static_cast<double>(b.flop) / 8.64e19, 1e-6);
    // just past 64 bits is rejected rather than wrapped
    in.steps = 400000;  // ~2.0e19 > 2^64-1
    EXPECT_THROW(slw::compute_budget(in), std::overflow_error);
}

TEST(Budget, OverflowDetected) {
    slw::BudgetInputs in;
    in.n_trainable = UINT64_MAX / 4;
    in.tokens_per_batch = 100;
    in.steps = 100;
    EXPECT_THROW(slw::compute_budget(in), std::overflow_error);
}

TEST(Budget, InvalidFrozenCostRejected) {
    slw::BudgetInputs in;
    in.n_trainable = 1;
    in.tokens_per_batch = 1;
    in.steps = 1;
    in.frozen_cost = {1, 0};
    EXPECT_THROW(slw::compute_budget(in), std::invalid_argument);
    in.frozen_cost = {3, 2};
    EXPECT_THROW(slw::compute_budget(in), std::invalid_argument);
}

TEST(PfDays, UnitConversion) {
    // one petaflop/s-day = 1e15 * 86400 = 8.64e19 FLOP
    EXPECT_DOUBLE_EQ(slw::pf_days(8.64e19), 1.0);
    EXPECT_DOUBLE_EQ(slw::pf_days(0.0), 0.0);
    EXPECT_DOUBLE_EQ(slw::pf_days(4.32e19), 0.5);
    EXPECT_THROW(slw::pf_days(-1.0), std::invalid_argument);
}

}  // namespace
