// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation-prompt rendering and score parsing. The rendered template is a
// wire contract: the golden file pins its exact bytes, and the parser tests
// pin the error taxonomy reward code dispatches on.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "selfref/prompt_kit.hpp"
#include "selfref/rand.hpp"

using namespace selfref;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open " << path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<int> identity_perm(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

}  // namespace

TEST_CASE("rendered prompt matches the golden file byte for byte") {
  const EvalPrompt prompt = render_eval_prompt(
      "what is 3+4 mod 5?", {"\\boxed{2}", "i am not sure"}, identity_perm(2));
  const std::string golden =
      read_file(std::string(SELFREF_SOURCE_DIR) + "/tests/golden/eval_prompt_golden.txt");
  CHECK(prompt.text == golden);
  CHECK(prompt.n_candidates == 2);
}

TEST_CASE("candidates land in their display slots") {
  SUBCASE("identity permutation keeps original order") {
    const EvalPrompt p = render_eval_prompt("Q", {"first", "second"}, {0, 1});
    const std::size_t block1 = p.text.find("[The Begin of Response 1]first");
    const std::size_t block2 = p.text.find("[The Begin of Response 2]second");
    CHECK(block1 != std::string::npos);
    CHECK(block2 != std::string::npos);
    CHECK(block1 < block2);
  }
  SUBCASE("swap permutation shows candidate 1 in block 1") {
    const EvalPrompt p = render_eval_prompt("Q", {"first", "second"}, {1, 0});
    CHECK(p.text.find("[The Begin of Response 1]second") != std::string::npos);
    CHECK(p.text.find("[The Begin of Response 2]first") != std::string::npos);
  }
}

TEST_CASE("rendered structure: one question block, N response blocks") {
  const EvalPrompt p = render_eval_prompt("Q", {"a", "b", "c"}, identity_perm(3));

  const auto count = [&](const std::string& needle) {
    int n = 0;
    std::size_t pos = 0;
    while ((pos = p.text.find(needle, pos)) != std::string::npos) {
      ++n;
      pos += needle.size();
    }
    return n;
  };
  CHECK(count("[The End of Question]") == 1);
  CHECK(count("[The Begin of Response") == 3);
  CHECK(count("[The End of Response") == 3);
  CHECK(p.text.find("[The Begin of Response 4]") == std::string::npos);
  // The format instruction keeps its literal example.
  CHECK(p.text.find("\\boxed{x, x}") != std::string::npos);
}

TEST_CASE("render rejects bad input") {
  CHECK_THROWS_AS(render_eval_prompt("Q", {"only"}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(render_eval_prompt("Q", {"a", "b"}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(render_eval_prompt("Q", {"a", "b"}, {0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(render_eval_prompt("Q", {"a", "b"}, {0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(render_eval_prompt("Q", {"a", "b"}, {-1, 0}), std::invalid_argument);
}

TEST_CASE("parse_scores reads the last complete boxed group") {
  SUBCASE("plain two-score case") {
    const auto r = parse_scores("Scores: \\boxed{3, 7}", 2);
    REQUIRE(r.ok());
    CHECK((*r.scores)[0] == 3.0);
    CHECK((*r.scores)[1] == 7.0);
  }
  SUBCASE("an earlier box is ignored") {
    const auto r = parse_scores("blah \\boxed{1} then final \\boxed{2, 2, 5}", 3);
    REQUIRE(r.ok());
    CHECK(*r.scores == std::vector<double>{2.0, 2.0, 5.0});
  }
  SUBCASE("decimals and negatives parse") {
    const auto r = parse_scores("\\boxed{1.5, -2, 0.25}", 3);
    REQUIRE(r.ok());
    CHECK(*r.scores == std::vector<double>{1.5, -2.0, 0.25});
  }
  SUBCASE("whitespace around entries is trimmed") {
    const auto r = parse_scores("\\boxed{  4 ,5 }", 2);
    REQUIRE(r.ok());
    CHECK(*r.scores == std::vector<double>{4.0, 5.0});
  }
  SUBCASE("an unterminated trailing box falls back to the last complete one") {
    const auto r = parse_scores("\\boxed{6, 1} junk \\boxed{9, 9", 2);
    REQUIRE(r.ok());
    CHECK(*r.scores == std::vector<double>{6.0, 1.0});
  }
}

TEST_CASE("parse_scores error taxonomy") {
  SUBCASE("no box at all") {
    const auto r = parse_scores("the best response is response 2", 2);
    CHECK_FALSE(r.ok());
    CHECK(r.error == ParseError::NoBox);
  }
  SUBCASE("unterminated box only") {
    const auto r = parse_scores("\\boxed{1, 2", 2);
    CHECK_FALSE(r.ok());
    CHECK(r.error == ParseError::NoBox);
  }
  SUBCASE("wrong entry count carries the found count") {
    const auto r = parse_scores("\\boxed{1, 2, 3}", 2);
    CHECK_FALSE(r.ok());
    CHECK(r.error == ParseError::CountMismatch);
    CHECK(r.found_count == 3);
  }
  SUBCASE("count mismatch wins over a bad entry elsewhere in the list") {
    // Three entries against an expectation of two: the count check fires
    // before entry parsing ever looks at "two".
    const auto r = parse_scores("\\boxed{1, two, 3}", 2);
    CHECK(r.error == ParseError::CountMismatch);
    CHECK(r.found_count == 3);
  }
  SUBCASE("non-numeric entry") {
    const auto r = parse_scores("\\boxed{1, two}", 2);
    CHECK(r.error == ParseError::NotNumeric);
  }
  SUBCASE("empty entry") {
    const auto r = parse_scores("\\boxed{1, }", 2);
    CHECK(r.error == ParseError::NotNumeric);
  }
  SUBCASE("non-finite entry") {
    const auto r = parse_scores("\\boxed{1, inf}", 2);
    CHECK(r.error == ParseError::NotNumeric);
  }
  SUBCASE("expected_count must be positive") {
    CHECK_THROWS_AS(parse_scores("\\boxed{1}", 0), std::invalid_argument);
  }
}

TEST_CASE("score round-trip through the emitted format") {
  // parse_scores("\boxed{v joined by ', '}") == v for representative lists.
  const std::vector<std::vector<double>> cases = {
      {0.0, 1.0},
      {5.0, 2.0, 9.0},
      {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0},
      {-3.5, 0.25, 7.0},
  };
  for (const auto& v : cases) {
    std::string body;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i > 0) body += ", ";
      std::ostringstream entry;
      entry << v[i];
      body += entry.str();
    }
    const auto r = parse_scores("Scores: \\boxed{" + body + "}",
                                static_cast<int>(v.size()));
    REQUIRE_MESSAGE(r.ok(), "failed on \\boxed{" << body << "}");
    CHECK(*r.scores == v);
  }
}

TEST_CASE("unpermute maps display order back to candidate order") {
  CHECK(unpermute({9.0, 1.0}, {1, 0}) == std::vector<double>{1.0, 9.0});
  CHECK(unpermute({4.0, 7.0}, {0, 1}) == std::vector<double>{4.0, 7.0});
  // Display slots hold candidates (2, 0, 1), so candidate 0 was shown in
  // slot 1, candidate 1 in slot 2, candidate 2 in slot 0.
  CHECK(unpermute({10.0, 20.0, 30.0}, {2, 0, 1}) ==
        std::vector<double>{20.0, 30.0, 10.0});

  CHECK_THROWS_AS(unpermute({1.0, 2.0}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(unpermute({1.0, 2.0}, {0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(unpermute({1.0, 2.0}, {0, 5}), std::invalid_argument);
}

TEST_CASE("unpermute inverts display-order permutation for random bijections") {
  auto rng = make_rng(7, RngChannel::Eval, 0, 0);
  for (int n = 2; n <= 8; ++n) {
    for (int rep = 0; rep < 20; ++rep) {
      const std::vector<int> perm = random_permutation(n, rng);
      std::vector<double> original(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) original[static_cast<std::size_t>(i)] = 10.0 + i;
      // Display order is what a judge sees: slot k holds candidate perm[k].
      std::vector<double> displayed(static_cast<std::size_t>(n));
      for (int k = 0; k < n; ++k) {
        displayed[static_cast<std::size_t>(k)] =
            original[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
      }
      CHECK(unpermute(displayed, perm) == original);
    }
  }
}

TEST_CASE("extract_boxed_answer") {
  CHECK(extract_boxed_answer("the answer is \\boxed{42}.") == "42");
  CHECK(extract_boxed_answer("no box here") == std::nullopt);
  CHECK(extract_boxed_answer("\\boxed{1} ... \\boxed{ 17 }") == "17");
  // One level of nested braces survives.
  CHECK(extract_boxed_answer("\\boxed{\\frac{1}{2}}") == "\\frac{1}{2}");
  // An unterminated last box does not shadow the previous complete one.
  CHECK(extract_boxed_answer("\\boxed{3} and \\boxed{oops") == "3");
}
