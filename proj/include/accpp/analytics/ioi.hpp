#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "accpp/core/error.hpp"

namespace accpp {

enum class IoiOrder { ABBA, BABA };

inline const char* to_string(IoiOrder o) { return o == IoiOrder::ABBA ? "ABBA" : "BABA"; }

// The fifteen low-level templates, written in BABA form. The final " [A]" is
// the answer and is not part of the prompt.
inline const std::array<std::string, 15>& ioi_templates() {
  static const std::array<std::string, 15> t = {
      "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
      "Then, [B] and [A] had a lot of fun at the [PLACE]. [B] gave a [OBJECT] to [A]",
      "Then, [B] and [A] were working at the [PLACE]. [B] decided to give a [OBJECT] to [A]",
      "Then, [B] and [A] were thinking about going to the [PLACE]. [B] wanted to give a [OBJECT] to [A]",
      "Then, [B] and [A] had a long argument, and afterwards [B] said to [A]",
      "After [B] and [A] went to the [PLACE], [B] gave a [OBJECT] to [A]",
      "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give it to [A]",
      "When [B] and [A] got a [OBJECT] at the [PLACE], [B] decided to give the [OBJECT] to [A]",
      "While [B] and [A] were working at the [PLACE], [B] gave a [OBJECT] to [A]",
      "While [B] and [A] were commuting to the [PLACE], [B] gave a [OBJECT] to [A]",
      "After the lunch, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
      "Afterwards, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A]",
      "Then, [B] and [A] had a long argument. Afterwards [B] said to [A]",
      "The [PLACE] [B] and [A] went to had a [OBJECT]. [B] gave it to [A]",
      "Friends [B] and [A] found a [OBJECT] at the [PLACE]. [B] gave it to [A]",
  };
  return t;
}

struct IoiPrompt {
  std::string text;    // prompt without the answer
  std::string answer;  // " " + name A
  std::string name_a, name_b, place, object;
  IoiOrder order = IoiOrder::BABA;
  int template_id = 1;  // 1..15
};

struct IoiWordLists {
  std::vector<std::string> names, places, objects;
};

namespace detail {

inline void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

}  // namespace detail

inline IoiPrompt make_ioi_prompt(int template_id, IoiOrder order, const std::string& a, const std::string& b,
                                 const std::string& place, const std::string& object) {
  ACCPP_REQUIRE(template_id >= 1 && template_id <= 15, ErrorCode::out_of_range, "template id must be 1..15");
  std::string t = ioi_templates()[static_cast<std::size_t>(template_id - 1)];
  const std::string tail = " [A]";
  t.erase(t.size() - tail.size());
  if (order == IoiOrder::ABBA) {
    const auto pos = t.find("[B] and [A]");
    t.replace(pos, 11, "[A] and [B]");
  }
  detail::replace_all(t, "[A]", a);
  detail::replace_all(t, "[B]", b);
  detail::replace_all(t, "[PLACE]", place);
  detail::replace_all(t, "[OBJECT]", object);
  return {t, " " + a, a, b, place, object, order, template_id};
}

/// n prompts for each (template, order) cell; names A != B.
inline std::vector<IoiPrompt> gen_ioi_dataset(const IoiWordLists& words, int n_per_cell, std::uint64_t seed) {
  ACCPP_REQUIRE(words.names.size() >= 2, ErrorCode::empty_input, "need at least two names");
  ACCPP_REQUIRE(!words.places.empty() && !words.objects.empty(), ErrorCode::empty_input,
                "place and object lists must be nonempty");
  ACCPP_REQUIRE(n_per_cell >= 1, ErrorCode::config, "n per cell must be positive");
  std::mt19937_64 rng(seed);
  auto pick = [&rng](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::vector<IoiPrompt> out;
  for (int t = 1; t <= 15; ++t)
    for (IoiOrder o : {IoiOrder::ABBA, IoiOrder::BABA})
      for (int i = 0; i < n_per_cell; ++i) {
        const std::string a = pick(words.names);
        std::string b = pick(words.names);
        while (b == a) b = pick(words.names);
        out.push_back(make_ioi_prompt(t, o, a, b, pick(words.places), pick(words.objects)));
      }
  return out;
}

}  // namespace accpp
