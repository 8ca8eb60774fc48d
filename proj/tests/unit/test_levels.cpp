#include <doctest.h>

#include <cmath>
#include <numbers>

#include "preroute/error.hpp"
#include "preroute/levels.hpp"
#include "support.hpp"

using namespace preroute;
using preroute::testing::Builder;

TEST_CASE("chain and diamond levels") {
  const auto chain = topo_levels(testing::chain3());
  CHECK(chain.levels == std::vector<std::vector<NodeId>>{{0}, {1}, {2}});
  CHECK(chain.max_level() == 2);

  Builder b;
  const auto pi = b.node(true);
  const auto a = b.node();
  const auto c = b.node();
  const auto d = b.node();
  b.net(pi, a, 0.1);
  b.net(pi, c, 0.1);
  b.net(a, d, 0.1);
  b.net(c, d, 0.1);
  const auto s = topo_levels(b.build());
  CHECK(s.levels == std::vector<std::vector<NodeId>>{{pi}, {a, c}, {d}});
  CHECK(s.max_level() == 2);
}

TEST_CASE("net_inv edges do not create dependencies") {
  const auto s = topo_levels(testing::chain3());
  CHECK(s.node_level == std::vector<std::int32_t>{0, 1, 2});
}

TEST_CASE("cycle raises") {
  Builder b;
  const auto a = b.node();
  const auto c = b.node();
  b.net(a, c, 0.1);
  b.net(c, a, 0.1);
  CHECK_THROWS_AS(topo_levels(b.build()), FormatError);
}

TEST_CASE("levels are longest-path depths") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = testing::generated(seed, 400);
    const auto s = topo_levels(g);
    std::vector<std::int32_t> expect(g.num_nodes(), 0);
    // Relax along edges until stable; the graph is acyclic, so at most n passes.
    for (std::size_t pass = 0; pass < g.num_nodes(); ++pass) {
      bool changed = false;
      for (const auto& e : g.edges()) {
        if (!CircuitGraph::is_timing_edge(e.kind)) continue;
        auto& d = expect[static_cast<std::size_t>(e.dst)];
        const auto cand = expect[static_cast<std::size_t>(e.src)] + 1;
        if (cand > d) {
          d = cand;
          changed = true;
        }
      }
      if (!changed) break;
    }
    CHECK(s.node_level == expect);
    std::size_t total = 0;
    for (std::size_t l = 0; l < s.levels.size(); ++l) {
      total += s.levels[l].size();
      CHECK(std::is_sorted(s.levels[l].begin(), s.levels[l].end()));
      for (NodeId v : s.levels[l]) CHECK(s.node_level[static_cast<std::size_t>(v)] == static_cast<std::int32_t>(l));
    }
    CHECK(total == g.num_nodes());
  }
}

TEST_CASE("level encoding values") {
  SUBCASE("x = 0") {
    const auto e = level_encoding(0.0, 3, 7.0);
    CHECK(e == std::vector<double>{0, 0, 1, 0, 1, 0, 1});
  }
  SUBCASE("x = L, one frequency") {
    const auto e = level_encoding(5.0, 1, 5.0);
    REQUIRE(e.size() == 3);
    CHECK(e[0] == 5.0);
    CHECK(e[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(e[2] == doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("x = 3, two frequencies, L = 6") {
    const auto e = level_encoding(3.0, 2, 6.0);
    const std::vector<double> want{3, 1, 0, 0, -1};
    REQUIRE(e.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(e[i] - want[i]) < 1e-12);
  }
  SUBCASE("general formula") {
    const int n = 8;
    const double L = 17.0;
    for (double x : {0.0, 1.0, 4.0, 11.0, 17.0}) {
      const auto e = level_encoding(x, n, L);
      REQUIRE(e.size() == 2 * n + 1);
      CHECK(e[0] == x);
      for (int k = 0; k < n; ++k) {
        const double a = std::pow(2.0, k) * std::numbers::pi * x / L;
        CHECK(std::abs(e[1 + 2 * k] - std::sin(a)) < 1e-12);
        CHECK(std::abs(e[2 + 2 * k] - std::cos(a)) < 1e-12);
      }
    }
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(level_encoding(-1.0, 2, 4.0), InvalidArgument);
    CHECK_THROWS_AS(level_encoding(5.0, 2, 4.0), InvalidArgument);
    CHECK_THROWS_AS(level_encoding(1.0, 0, 4.0), InvalidArgument);
  }
}
