#pragma once

// Deterministic English-like filler text for self-contained training tests.
// Template sentences over a small weighted vocabulary, grouped into blank-
// line-separated paragraphs so the corpus loader sees many documents.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lnablate::testsupport {

inline std::string synth_text(size_t min_bytes, uint64_t seed) {
  static const std::vector<std::string> nouns = {
      "river",  "mountain", "garden", "letter", "window",  "teacher", "bridge", "forest",
      "market", "stone",    "harbor", "engine", "library", "painter", "valley", "winter",
      "candle", "journey",  "island", "farmer", "street",  "morning", "shadow", "barrel",
      "violin", "kitchen",  "sailor", "meadow", "lantern", "weather"};
  static const std::vector<std::string> verbs = {
      "carries", "follows", "remembers", "watches", "crosses", "gathers", "holds",
      "reaches", "repairs", "discovers", "guards",  "changes", "answers", "borrows",
      "teaches", "passes",  "observes",  "shelters"};
  static const std::vector<std::string> adjectives = {
      "quiet", "old",    "bright", "narrow", "heavy", "gentle", "distant", "warm",
      "green", "broken", "silent", "steep",  "small", "early",  "familiar"};
  static const std::vector<std::string> adverbs = {
      "slowly", "carefully", "often", "quietly", "again", "together", "eventually"};
  static const std::vector<std::string> openers = {
      "in the morning", "after the rain",    "near the old town", "for many years",
      "by the shore",   "during the winter", "before sunrise"};

  std::mt19937_64 rng(seed);
  // Zipf-ish picks: squaring a uniform skews toward the front of each list.
  auto pick = [&rng](const std::vector<std::string>& words) -> const std::string& {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const size_t i = static_cast<size_t>(u * u * static_cast<double>(words.size()));
    return words[std::min(i, words.size() - 1)];
  };
  auto chance = [&rng](double p) {
    return (static_cast<double>(rng() >> 11) * 0x1.0p-53) < p;
  };

  std::string out;
  out.reserve(min_bytes + 1024);
  while (out.size() < min_bytes) {
    const int sentences = 3 + static_cast<int>(rng() % 6);
    for (int s = 0; s < sentences; ++s) {
      std::string sentence;
      if (chance(0.3)) {
        sentence += pick(openers);
        sentence += ", ";
      }
      sentence += "the ";
      if (chance(0.5)) {
        sentence += pick(adjectives);
        sentence += " ";
      }
      sentence += pick(nouns);
      sentence += " ";
      sentence += pick(verbs);
      sentence += " the ";
      if (chance(0.35)) {
        sentence += pick(adjectives);
        sentence += " ";
      }
      sentence += pick(nouns);
      if (chance(0.4)) {
        sentence += " ";
        sentence += pick(adverbs);
      }
      sentence[0] = static_cast<char>(std::toupper(sentence[0]));
      sentence += chance(0.9) ? "." : "?";
      out += sentence;
      out += s + 1 == sentences ? "\n\n" : " ";
    }
  }
  return out;
}

}  // namespace lnablate::testsupport
