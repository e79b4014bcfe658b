#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcrlm/error.hpp"

namespace tcrlm::seq {

// Token layout: 0 = PAD, 1 = SOS, 2 = EOS, 3..22 = amino acids in
// alphabetical one-letter order. The assignment inside 0..22 is our
// convention; checkpoints embed the table so consumers need not assume it.
inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstResidue = 3;
inline constexpr int kVocabSize = 23;
inline constexpr char kAminoAcids[] = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr int kNumAminoAcids = 20;

// -1 for anything that is not a canonical one-letter code.
int residue_to_id(char c) noexcept;
char id_to_residue(int id);  // valid for ids 3..22 only

// Symbol names for all 23 ids ("<PAD>", "<SOS>", "<EOS>", "A", ...).
const std::vector<std::string>& vocabulary_symbols();

// A TCR sequence is a plain string of canonical residues. validate throws
// InvalidResidue naming the offending character and its 0-based position.
using TcrSequence = std::string;
void validate_sequence(const TcrSequence& s);

// [SOS] + residues + [EOS]; never emits PAD.
std::vector<int> encode(const TcrSequence& s);

// Inverse of encode; requires exact [SOS, residues..., EOS] framing.
TcrSequence decode(const std::vector<int>& ids);

struct Repertoire {
  // Distinct sequences with aggregated counts, in first-appearance order.
  std::vector<std::pair<TcrSequence, std::int64_t>> entries;
  std::string source;

  std::int64_t total_count() const {
    std::int64_t t = 0;
    for (const auto& [s, c] : entries) t += c;
    return t;
  }

  // Aggregates duplicates; validates residues and counts.
  static Repertoire from_sequences(
      const std::vector<std::pair<TcrSequence, std::int64_t>>& raw,
      std::string source = "");
};

// Plain-text repertoire file: one sequence per line, optional single-TAB
// count column, '#' comments and blank lines skipped, LF or CRLF endings.
// Sequences longer than max_residues are rejected (bounds model context).
Repertoire load_repertoire(const std::string& path, int max_residues = 30);

void save_repertoire(const Repertoire& rep, const std::string& path);

}  // namespace tcrlm::seq
