#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geovec/error.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/osm.hpp"

namespace geovec {

/// Which sections a prompt carries. The three kinds mirror the prompt ablation:
/// instruction only, plus address, plus the k nearest places.
class PromptVariant {
 public:
  enum class Kind { InstructionOnly, InstructionAddress, InstructionAddressTopK };

  static PromptVariant instruction_only() { return PromptVariant(Kind::InstructionOnly, 0); }
  static PromptVariant instruction_address() { return PromptVariant(Kind::InstructionAddress, 0); }
  static PromptVariant top_k(int k) {
    if (k < 1) fail(Errc::InvalidArgument, "top-k variant needs k >= 1");
    return PromptVariant(Kind::InstructionAddressTopK, k);
  }

  Kind kind() const noexcept { return kind_; }
  int k() const noexcept { return k_; }
  bool needs_address() const noexcept { return kind_ != Kind::InstructionOnly; }
  bool needs_places() const noexcept { return kind_ == Kind::InstructionAddressTopK; }

  // k in {1, 5, 10} are the ablated settings; anything else is an extension.
  bool is_ablation_setting() const noexcept {
    return kind_ != Kind::InstructionAddressTopK || k_ == 1 || k_ == 5 || k_ == 10;
  }

  std::string to_string() const {
    switch (kind_) {
      case Kind::InstructionOnly: return "instruction-only";
      case Kind::InstructionAddress: return "instruction-address";
      case Kind::InstructionAddressTopK: return "instruction-address-top" + std::to_string(k_);
    }
    return {};
  }

  static PromptVariant parse(std::string_view s) {
    if (s == "instruction-only") return instruction_only();
    if (s == "instruction-address") return instruction_address();
    constexpr std::string_view prefix = "instruction-address-top";
    if (s.substr(0, prefix.size()) == prefix && s.size() > prefix.size()) {
      int k = 0;
      for (char c : s.substr(prefix.size())) {
        if (c < '0' || c > '9') fail(Errc::InvalidArgument, "bad prompt variant: " + std::string(s));
        k = k * 10 + (c - '0');
      }
      return top_k(k);
    }
    fail(Errc::InvalidArgument, "bad prompt variant: " + std::string(s));
  }

  friend bool operator==(const PromptVariant&, const PromptVariant&) = default;

 private:
  PromptVariant(Kind kind, int k) : kind_(kind), k_(k) {}
  Kind kind_;
  int k_;
};

struct Prompt {
  PromptVariant variant;
  std::string text;
  Coordinate coord;
};

inline std::vector<osm::PlaceOfInterest> select_top_k(std::span<const osm::PlaceOfInterest> places, std::size_t k) {
  const auto n = std::min(k, places.size());
  return {places.begin(), places.begin() + static_cast<std::ptrdiff_t>(n)};
}

namespace detail {

// Collapse control characters and runs of whitespace so every rendered field
// stays on one line with no trailing blanks.
inline std::string single_line(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : s) {
    if (c < 0x20 || c == 0x7f || c == ' ') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(c);
  }
  return out;
}

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // "-0.0000" would make identical points render differently.
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);
  return s;
}

inline long rounded_bearing(double bearing_deg) { return std::lround(bearing_deg) % 360; }

}  // namespace detail

inline std::string render_place_line(std::size_t rank, const osm::PlaceOfInterest& p) {
  return std::to_string(rank) + ". " + detail::single_line(p.name) + ", " + detail::fixed(p.distance_km, 1) + " km, " +
         std::string(to_string(p.direction)) + " (" + std::to_string(detail::rounded_bearing(p.bearing_deg)) +
         " degrees)";
}

struct ParsedPlaceLine {
  std::size_t rank = 0;
  std::string name;
  double distance_km = 0.0;
  Direction direction = Direction::North;
  int bearing_deg = 0;
};

// Inverse of render_place_line. Names may contain commas, so fields are taken
// from the right.
inline ParsedPlaceLine parse_place_line(std::string_view line) {
  auto bad = [&] { fail(Errc::ParseError, "not a nearby-place line: " + std::string(line)); };
  ParsedPlaceLine out;
  const auto dot = line.find(". ");
  if (dot == std::string_view::npos || dot == 0) bad();
  for (char c : line.substr(0, dot)) {
    if (c < '0' || c > '9') bad();
    out.rank = out.rank * 10 + static_cast<std::size_t>(c - '0');
  }
  auto rest = line.substr(dot + 2);
  constexpr std::string_view tail = " degrees)";
  if (rest.size() < tail.size() || rest.substr(rest.size() - tail.size()) != tail) bad();
  rest.remove_suffix(tail.size());
  const auto paren = rest.rfind(" (");
  if (paren == std::string_view::npos) bad();
  out.bearing_deg = std::stoi(std::string(rest.substr(paren + 2)));
  rest = rest.substr(0, paren);
  const auto dir_sep = rest.rfind(" km, ");
  if (dir_sep == std::string_view::npos) bad();
  const auto dir = parse_direction(rest.substr(dir_sep + 5));
  if (!dir) bad();
  out.direction = *dir;
  rest = rest.substr(0, dir_sep);
  const auto name_sep = rest.rfind(", ");
  if (name_sep == std::string_view::npos) bad();
  out.distance_km = std::stod(std::string(rest.substr(name_sep + 2)));
  out.name = std::string(rest.substr(0, name_sep));
  return out;
}

inline std::string instruction_line(const Coordinate& coord) {
  return "Describe the geographic, economic, and social characteristics of the location at coordinates (" +
         detail::fixed(coord.lat(), 4) + ", " + detail::fixed(coord.lon(), 4) + ").";
}

/// Renders the canonical prompt. Every line, including the last, ends in "\n",
/// so shorter variants are byte prefixes of longer ones.
inline Prompt build_prompt(const PromptVariant& variant, const Coordinate& coord,
                           const std::optional<osm::GeocodeResult>& geocode,
                           std::optional<std::span<const osm::PlaceOfInterest>> places) {
  if (variant.needs_address() && !geocode)
    fail(Errc::MissingSection, "variant " + variant.to_string() + " needs a geocode result");
  if (variant.needs_places() && !places)
    fail(Errc::MissingSection, "variant " + variant.to_string() + " needs nearby places");

  std::string text = instruction_line(coord) + "\n";
  if (variant.needs_address()) {
    std::string address;
    for (const auto& [level, value] : geocode->components) {
      const auto part = detail::single_line(value);
      if (part.empty()) continue;
      if (!address.empty()) address += ", ";
      address += part;
    }
    if (address.empty()) address = detail::single_line(geocode->display);
    text += "Address: " + address + "\n";
  }
  if (variant.needs_places()) {
    text += "Nearby Places:\n";
    const auto top = select_top_k(*places, static_cast<std::size_t>(variant.k()));
    for (std::size_t i = 0; i < top.size(); ++i) text += render_place_line(i + 1, top[i]) + "\n";
  }
  return Prompt{variant, std::move(text), coord};
}

}  // namespace geovec
