#include "tcrlm/seqcore.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace tcrlm::seq {

namespace {

std::array<int, 256> build_residue_table() {
  std::array<int, 256> t{};
  t.fill(-1);
  for (int i = 0; i < kNumAminoAcids; ++i) {
    t[static_cast<unsigned char>(kAminoAcids[i])] = kFirstResidue + i;
  }
  return t;
}

const std::array<int, 256> kResidueTable = build_residue_table();

}  // namespace

int residue_to_id(char c) noexcept {
  return kResidueTable[static_cast<unsigned char>(c)];
}

char id_to_residue(int id) {
  if (id < kFirstResidue || id >= kVocabSize) {
    fail("MalformedEncoding",
         "id " + std::to_string(id) + " is not a residue token");
  }
  return kAminoAcids[id - kFirstResidue];
}

const std::vector<std::string>& vocabulary_symbols() {
  static const std::vector<std::string> symbols = [] {
    std::vector<std::string> v = {"<PAD>", "<SOS>", "<EOS>"};
    for (int i = 0; i < kNumAminoAcids; ++i) v.emplace_back(1, kAminoAcids[i]);
    return v;
  }();
  return symbols;
}

void validate_sequence(const TcrSequence& s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (residue_to_id(s[i]) < 0) {
      fail("InvalidResidue", std::string("'") + s[i] + "' at position " +
                                 std::to_string(i));
    }
  }
}

std::vector<int> encode(const TcrSequence& s) {
  std::vector<int> ids;
  ids.reserve(s.size() + 2);
  ids.push_back(kSos);
  for (std::size_t i = 0; i < s.size(); ++i) {
    int id = residue_to_id(s[i]);
    if (id < 0) {
      fail("InvalidResidue", std::string("'") + s[i] + "' at position " +
                                 std::to_string(i));
    }
    ids.push_back(id);
  }
  ids.push_back(kEos);
  return ids;
}

TcrSequence decode(const std::vector<int>& ids) {
  if (ids.size() < 2 || ids.front() != kSos || ids.back() != kEos) {
    fail("MalformedEncoding", "expected [SOS, residues..., EOS] framing");
  }
  TcrSequence s;
  s.reserve(ids.size() - 2);
  for (std::size_t i = 1; i + 1 < ids.size(); ++i) {
    if (ids[i] < kFirstResidue || ids[i] >= kVocabSize) {
      fail("MalformedEncoding", "non-residue id " + std::to_string(ids[i]) +
                                    " at position " + std::to_string(i));
    }
    s.push_back(id_to_residue(ids[i]));
  }
  return s;
}

Repertoire Repertoire::from_sequences(
    const std::vector<std::pair<TcrSequence, std::int64_t>>& raw,
    std::string source) {
  Repertoire rep;
  rep.source = std::move(source);
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& [s, c] : raw) {
    validate_sequence(s);
    if (c < 1) fail("ParseError", "nonpositive count for " + s);
    auto it = index.find(s);
    if (it == index.end()) {
      index.emplace(s, rep.entries.size());
      rep.entries.emplace_back(s, c);
    } else {
      rep.entries[it->second].second += c;
    }
  }
  return rep;
}

Repertoire load_repertoire(const std::string& path, int max_residues) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("Io", "cannot open " + path);

  Repertoire rep;
  rep.source = path;
  std::unordered_map<std::string, std::size_t> index;

  std::string line;
  std::size_t line_no = 0;
  auto parse_error = [&](const std::string& reason) {
    fail("ParseError", "line " + std::to_string(line_no) + ": " + reason);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;

    std::string seq = line;
    std::int64_t count = 1;
    std::size_t tab = line.find('\t');
    if (tab != std::string::npos) {
      if (line.find('\t', tab + 1) != std::string::npos) {
        parse_error("more than one TAB column");
      }
      seq = line.substr(0, tab);
      std::string count_str = line.substr(tab + 1);
      std::size_t consumed = 0;
      try {
        count = std::stoll(count_str, &consumed);
      } catch (const std::exception&) {
        parse_error("malformed count '" + count_str + "'");
      }
      if (consumed != count_str.size()) {
        parse_error("malformed count '" + count_str + "'");
      }
      if (count < 1) parse_error("nonpositive count");
    }

    if (seq.empty()) parse_error("empty sequence");
    if (int(seq.size()) > max_residues) {
      parse_error("sequence longer than " + std::to_string(max_residues) +
                  " residues");
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (residue_to_id(seq[i]) < 0) {
        parse_error(std::string("invalid residue '") + seq[i] + "'");
      }
    }

    auto it = index.find(seq);
    if (it == index.end()) {
      index.emplace(seq, rep.entries.size());
      rep.entries.emplace_back(seq, count);
    } else {
      rep.entries[it->second].second += count;
    }
  }
  if (in.bad()) fail("Io", "read failure on " + path);
  return rep;
}

void save_repertoire(const Repertoire& rep, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("Io", "cannot write " + path);
  for (const auto& [s, c] : rep.entries) {
    out << s;
    if (c != 1) out << '\t' << c;
    out << '\n';
  }
  if (!out.flush()) fail("Io", "write failure on " + path);
}

}  // namespace tcrlm::seq
