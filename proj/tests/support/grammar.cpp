#include "grammar.hpp"

namespace ula::testsupport {

namespace {

struct Lexicon {
  std::vector<std::string> subjects;
  std::vector<std::string> verbs;
  std::vector<std::string> objects;
  std::vector<std::string> adverbs;
};

const Lexicon& lexicon(Style style) {
  static const Lexicon wizards{
      {"the wizard", "the apprentice", "the archmage", "a sorcerer", "the familiar"},
      {"conjured", "enchanted", "transmuted", "banished", "scried"},
      {"the grimoire", "a silver rune", "the obsidian tower", "a phoenix feather",
       "the warded gate"},
      {"quietly", "at midnight", "without haste", "beneath the moon", "once more"},
  };
  static const Lexicon mariners{
      {"the captain", "the bosun", "a deckhand", "the navigator", "the lookout"},
      {"rigged", "charted", "weathered", "moored", "salvaged"},
      {"the mainsail", "a rusted anchor", "the northern strait", "a cargo crate",
       "the harbor buoy"},
      {"before dawn", "against the tide", "in heavy fog", "with steady hands",
       "along the reef"},
  };
  return style == Style::Wizards ? wizards : mariners;
}

const std::string& pick(const std::vector<std::string>& v, Rng& rng) {
  return v[rng.uniform_int(v.size())];
}

}  // namespace

std::string make_sentence(Style style, Rng& rng) {
  const Lexicon& lex = lexicon(style);
  std::string s = pick(lex.subjects, rng) + " " + pick(lex.verbs, rng) + " " +
                  pick(lex.objects, rng);
  if (rng.uniform() < 0.5) s += " " + pick(lex.adverbs, rng);
  const double r = rng.uniform();
  s += r < 0.8 ? "." : (r < 0.9 ? "?" : "!");
  return s;
}

std::string make_text(Style style, size_t n, uint64_t seed) {
  Rng rng(seed);
  std::string out;
  for (size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += make_sentence(style, rng);
  }
  return out;
}

std::vector<std::string> make_sentences(Style style, size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(make_sentence(style, rng));
  return out;
}

}  // namespace ula::testsupport
