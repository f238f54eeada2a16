#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/errors.hpp"
#include "rng.hpp"

namespace cvloc::corpus {

geoindex::LatLon GridConfig::cell_center(std::size_t col, std::size_t row) const {
  const double m_per_deg = 2.0 * std::numbers::pi * geoindex::kEarthRadiusM / 360.0;
  const double dlat = spacing_m / m_per_deg;
  const double dlon = spacing_m / (m_per_deg * std::cos(origin_lat * std::numbers::pi / 180.0));
  return {origin_lat + static_cast<double>(row) * dlat, origin_lon + static_cast<double>(col) * dlon};
}

std::string direction_name(Direction d) {
  switch (d) {
    case Direction::front: return "front";
    case Direction::back: return "back";
    case Direction::left: return "left";
    case Direction::right: return "right";
  }
  return "front";
}

std::string view_name(ViewKind v) { return v == ViewKind::pano ? "pano" : "single"; }

ViewKind parse_view(std::string_view name) {
  if (name == "pano") return ViewKind::pano;
  if (name == "single") return ViewKind::single;
  throw FormatError("unknown view kind '" + std::string(name) + "'");
}

const std::vector<std::string>& name_first_words() {
  static const std::vector<std::string> words = {
      "burger", "royal",  "lucky",   "happy",  "urban",   "grand",   "little",  "metro",   "star",   "ocean",
      "maple",  "liberty", "harbor", "summit", "pioneer", "crystal", "empire", "sunrise", "velvet", "atlas"};
  return words;
}

const std::vector<std::string>& name_second_words() {
  static const std::vector<std::string> words = {
      "mania", "palace", "house",  "express", "garden", "plaza", "kitchen", "market", "studio",   "lounge",
      "depot", "works",  "hub",    "point",   "bistro", "station", "square", "den",   "emporium", "haven"};
  return words;
}

const std::vector<std::string>& categories() {
  static const std::vector<std::string> words = {"restaurant", "cafe",      "bank",   "pharmacy",
                                                 "hotel",      "bookstore", "bakery", "supermarket"};
  return words;
}

const std::vector<std::string>& colors() {
  static const std::vector<std::string> words = {"red", "blue", "green", "yellow", "white", "gray", "brown", "orange"};
  return words;
}

const std::vector<std::string>& materials() {
  static const std::vector<std::string> words = {"brick", "glass", "concrete", "wood", "stone", "metal"};
  return words;
}

namespace {

// "a" or "an" followed by the phrase.
std::string article(const std::string& phrase) {
  const bool vowel = !phrase.empty() && std::string_view("aeiou").find(phrase[0]) != std::string_view::npos;
  return (vowel ? "an " : "a ") + phrase;
}

std::string capitalized(std::string w) {
  if (!w.empty()) w[0] = static_cast<char>(w[0] - 'a' + 'A');
  return w;
}

const char* const kSky[] = {"clear", "cloudy", "overcast", "hazy"};
const char* const kNumber[] = {"zero", "one", "two", "three"};

const std::vector<std::string>& distractor_bank() {
  static const std::vector<std::string> s = {
      "A delivery van idles near the curb while music drifts from an upper window.",
      "Somewhere down the block a dog barks at a passing cyclist in a hurry.",
      "Pigeons gather around a bench where someone left crumbs from a morning snack.",
      "The air smells faintly of rain and fresh coffee from a distant vendor.",
      "A group of students walks past talking loudly about an upcoming exam.",
      "Faded posters for an old concert are still taped to a lamp post.",
      "A street sweeper hums slowly along the gutter collecting dust and leaves.",
      "Two people argue politely over directions while checking a folded paper map.",
      "An elderly man feeds sparrows from a paper bag beside the bus shelter.",
      "Distant sirens rise and fall somewhere beyond the rooftops of the district.",
      "A child in a raincoat splashes through a shallow puddle near the gutter.",
      "Laundry hangs from a balcony and sways gently in the afternoon breeze.",
  };
  return s;
}

std::string direction_phrase(Direction d, Rng& rng) {
  static const char* const phrases[4][2] = {
      {"In front", "Straight ahead"}, {"Behind", "At the back"}, {"On the left", "To the left"},
      {"On the right", "To the right"}};
  return phrases[static_cast<int>(d)][rng.below(2)];
}

std::string road_sentence(const SceneSpec& s, Rng& rng) {
  const auto& r = s.road;
  const std::string n = kNumber[r.lanes];
  const std::string lanes = r.lanes == 1 ? "lane" : "lanes";
  if (s.view == ViewKind::single) {
    std::string out = "The road ahead ";
    out += r.north_south ? "continues straight" : "crosses from side to side";
    out += " with " + n + " " + lanes;
    if (r.crossing) out += " and a crossing";
    return out + ".";
  }
  const std::string span = r.north_south ? "from front to back" : "from left to right";
  switch (rng.below(3)) {
    case 0:
      return "The road runs " + span + " with " + n + " " + lanes +
             (r.crossing ? ", and a zebra crossing cuts across it." : ".");
    case 1:
      return "A " + n + " lane street stretches " + span +
             (r.crossing ? " and has a marked pedestrian crossing." : ".");
    default:
      return "Here a street with " + n + " " + lanes + " passes " + span +
             (r.crossing ? ", crossed by a zebra crossing." : ".");
  }
}

std::string poi_sentence(const SceneSpec& s, const Poi& p, Rng& rng) {
  const std::string& color = colors()[p.color];
  const std::string& material = materials()[p.material];
  const std::string& category = categories()[p.category];
  const std::string name = p.name();
  if (s.view == ViewKind::single) {
    switch (rng.below(3)) {
      case 0: return "There stands " + article(color + " " + category) + " named " + name + ".";
      case 1: return "The sign " + name + " hangs on " + article(color + " " + category) + ".";
      default: return "There is " + article(category) + " called " + name + ".";
    }
  }
  const std::string dir = direction_phrase(p.direction, rng);
  switch (rng.below(3)) {
    case 0: return dir + ", " + article(color + " " + material + " " + category) + " carries the sign " + name + ".";
    case 1: return dir + " stands " + article(color + " " + category) + " built of " + material + ", its sign reading " + name + ".";
    default: return dir + " there is " + article(category) + " named " + name + " with " + article(color + " " + material) + " facade.";
  }
}

std::string environment_sentences(const SceneSpec& s) {
  static const char* const trees[] = {"No trees line the sidewalks.", "A few trees line the sidewalks.",
                                      "Many trees shade the sidewalks."};
  static const char* const vehicles[] = {"No vehicles are on the road.", "A few cars pass by.",
                                         "Traffic is heavy with many cars."};
  const auto& e = s.env;
  std::string out = trees[e.trees];
  if (s.view == ViewKind::pano) {
    out += " Most buildings are made of " + materials()[e.building_material] + " and are " +
           (e.dense ? "densely" : "loosely") + " packed.";
  }
  out += std::string(" The sky is ") + kSky[e.sky] + ".";
  if (s.view == ViewKind::pano) out += std::string(" ") + vehicles[e.vehicles];
  return out;
}

}  // namespace

std::string Poi::name() const {
  return capitalized(name_first_words()[first_word]) + " " + capitalized(name_second_words()[second_word]);
}

std::vector<std::string> SceneSpec::poi_tags() const {
  std::vector<std::string> tags;
  for (const auto& p : pois) {
    tags.push_back(name_first_words()[p.first_word]);
    tags.push_back(name_second_words()[p.second_word]);
    tags.push_back(categories()[p.category]);
  }
  return tags;
}

SceneSpec generate_scene(std::uint64_t seed, const GridConfig& grid) {
  if (grid.cols == 0 || grid.rows == 0) throw ParameterError("grid must have at least one cell");
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  s.col = rng.below(grid.cols);
  s.row = rng.below(grid.rows);
  s.location = grid.cell_center(s.col, s.row);

  s.road.north_south = rng.chance(0.5);
  s.road.lanes = 1 + static_cast<int>(rng.below(3));
  s.road.crossing = rng.chance(0.4);

  const std::size_t u = rng.below(100);
  const std::size_t count = u < 10 ? 1 : u < 40 ? 2 : u < 75 ? 3 : 4;
  std::vector<Direction> dirs = {Direction::front, Direction::back, Direction::left, Direction::right};
  rng.shuffle(dirs);
  for (std::size_t i = 0; i < count; ++i) {
    Poi p;
    bool unique = false;
    while (!unique) {
      p.first_word = rng.below(name_first_words().size());
      p.second_word = rng.below(name_second_words().size());
      unique = std::none_of(s.pois.begin(), s.pois.end(), [&](const Poi& q) { return q.name() == p.name(); });
    }
    p.category = rng.below(categories().size());
    p.direction = dirs[i];
    p.color = rng.below(colors().size());
    p.material = rng.below(materials().size());
    s.pois.push_back(p);
  }

  s.view = rng.chance(0.5) ? ViewKind::pano : ViewKind::single;
  s.env.trees = static_cast<int>(rng.below(3));
  s.env.building_material = rng.below(materials().size());
  s.env.dense = rng.chance(0.5);
  s.env.sky = static_cast<int>(rng.below(4));
  s.env.vehicles = static_cast<int>(rng.below(3));
  std::vector<std::size_t> slots = {0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(slots);
  const std::size_t n_trees = s.env.trees == 0 ? 0 : s.env.trees == 1 ? 2 : 5;
  s.env.tree_slots.assign(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(n_trees));
  std::sort(s.env.tree_slots.begin(), s.env.tree_slots.end());
  return s;
}

std::string describe_scene(const SceneSpec& spec, std::size_t distractor_clauses) {
  Rng rng(spec.seed ^ 0x7e37ULL);
  std::string out;
  if (distractor_clauses > 0) {
    std::vector<std::string> bank = distractor_bank();
    rng.shuffle(bank);
    for (std::size_t i = 0; i < distractor_clauses; ++i) out += bank[i % bank.size()] + " ";
  }
  out += road_sentence(spec, rng);
  for (const auto& p : spec.pois) out += " " + poi_sentence(spec, p, rng);
  out += " " + environment_sentences(spec);
  return out;
}

}  // namespace cvloc::corpus
