#pragma once

#include <set>
#include <string>
#include <vector>

namespace accpp {

// Default fill-ins for the name-mover prompts. All single tokens in the toy
// vocabulary (leading space included).
inline const std::vector<std::string>& default_names() {
  static const std::vector<std::string> v = {
      "Michael", "Jim",   "John",  "Mary",    "Sarah",   "David", "Laura", "Kevin", "Emma",  "Paul",
      "Lisa",    "Mark",  "Alice", "Bob",     "Grace",   "Tom",   "Anna",  "Peter", "Rose",  "Daniel",
      "Kate",    "Steve", "Helen", "Richard", "Amy",     "James", "Claire", "Brian", "Julia", "Adam"};
  return v;
}

inline const std::vector<std::string>& default_places() {
  static const std::vector<std::string> v = {"office", "garden", "house",    "store",   "school",
                                             "restaurant", "station", "hospital", "park", "library"};
  return v;
}

inline const std::vector<std::string>& default_objects() {
  static const std::vector<std::string> v = {"computer", "snack", "basketball", "ring", "drink",
                                             "book",     "bone",  "necklace",   "kiss", "apple"};
  return v;
}

/// Word-level vocabulary for synthetic models: an end-of-text marker, the
/// words used by the name-mover templates, the default fill-ins, and every
/// printable ASCII character so that any ASCII text tokenizes.
inline std::vector<std::string> default_toy_vocab() {
  std::vector<std::string> out = {"<|endoftext|>"};
  std::set<std::string> seen(out.begin(), out.end());
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) out.push_back(w);
  };
  static const char* words[] = {
      "Then", "After", "When", "While", "Afterwards", "The", "Friends", "and", "went", "to", "the",
      "had", "a", "lot", "of", "fun", "at", "were", "working", "decided", "give", "thinking", "about",
      "going", "wanted", "long", "argument", "afterwards", "said", "gave", "got", "it", "commuting",
      "lunch", "found", "is", "in", "was", "on", "with", "that", "for", "this", "not", "he", "she",
      "they", "we", "you", "I", "be", "have", "do", "what", "which", "there", "their", "one", "all"};
  for (const char* w : words) {
    add(w);
    add(std::string(" ") + w);
  }
  for (const auto* list : {&default_names(), &default_places(), &default_objects()})
    for (const auto& w : *list) {
      add(w);
      add(" " + w);
    }
  for (char c = 32; c < 127; ++c) add(std::string(1, c));
  return out;
}

}  // namespace accpp
