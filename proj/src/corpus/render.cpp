#include <algorithm>
#include <array>
#include <cmath>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/errors.hpp"
#include "rng.hpp"

namespace cvloc::corpus {

namespace {

using Rgb = std::array<int, 3>;

// Drawing happens in a 64 x 64 unit coordinate frame scaled to the raster.
class Canvas {
 public:
  explicit Canvas(std::size_t size) : r_(size, size), unit_(static_cast<double>(size) / 64.0) {}

  void rect(double x0, double y0, double x1, double y1, Rgb c) {
    for_rect(x0, y0, x1, y1, [&](std::size_t x, std::size_t y) { set(x, y, c); });
  }

  void disc(double cx, double cy, double radius, Rgb c) {
    for_rect(cx - radius, cy - radius, cx + radius, cy + radius, [&](std::size_t x, std::size_t y) {
      const double dx = (static_cast<double>(x) + 0.5) / unit_ - cx;
      const double dy = (static_cast<double>(y) + 0.5) / unit_ - cy;
      if (dx * dx + dy * dy <= radius * radius) set(x, y, c);
    });
  }

  // Adds uniform noise in [-amp, amp] to every pixel of the rectangle.
  void noise(double x0, double y0, double x1, double y1, int amp, Rng& rng) {
    for_rect(x0, y0, x1, y1, [&](std::size_t x, std::size_t y) {
      auto* p = r_.pixel(x, y);
      const int d = static_cast<int>(rng.below(2 * amp + 1)) - amp;
      for (int k = 0; k < 3; ++k) p[k] = clamp8(p[k] + d);
    });
  }

  Raster take() { return std::move(r_); }

 private:
  static std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

  void set(std::size_t x, std::size_t y, Rgb c) {
    auto* p = r_.pixel(x, y);
    for (int k = 0; k < 3; ++k) p[k] = clamp8(c[k]);
  }

  template <typename F>
  void for_rect(double x0, double y0, double x1, double y1, F&& f) {
    const auto lo = [&](double v) { return static_cast<std::size_t>(std::clamp(std::lround(v * unit_), 0L, static_cast<long>(r_.width))); };
    const std::size_t px0 = lo(x0), px1 = lo(x1), py0 = lo(y0), py1 = lo(y1);
    for (std::size_t y = py0; y < py1; ++y) {
      for (std::size_t x = px0; x < px1; ++x) f(x, y);
    }
  }

  Raster r_;
  double unit_;
};

const Rgb kCategoryColor[] = {{230, 120, 40}, {150, 90, 50},  {40, 90, 200},  {40, 170, 80},
                              {150, 60, 170}, {200, 40, 60},  {230, 200, 60}, {40, 170, 190}};
const Rgb kCodeColor[] = {{20, 20, 20}, {250, 250, 250}, {128, 128, 128}, {250, 150, 200}, {20, 30, 90}};
const Rgb kFacadeColor[] = {{200, 40, 40},   {50, 80, 200},   {50, 150, 60},  {230, 200, 50},
                            {235, 235, 235}, {140, 140, 140}, {130, 90, 50}, {230, 130, 40}};
const Rgb kRoofColor[] = {{140, 80, 60}, {120, 150, 170}, {150, 150, 145}, {120, 95, 60}, {130, 125, 115}, {170, 175, 180}};
const Rgb kSkyColor[] = {{120, 170, 230}, {180, 185, 195}, {120, 120, 130}, {200, 190, 170}};

// Top-left corner of each direction's 16-unit block, clear of any road band.
struct Slot {
  double x, y;
};
Slot poi_slot(Direction d) {
  switch (d) {
    case Direction::front: return {8, 0};
    case Direction::right: return {48, 8};
    case Direction::back: return {40, 48};
    case Direction::left: return {0, 40};
  }
  return {8, 0};
}

// Centres of the eight 8-unit tree cells.
const Slot kTreeSlots[] = {{4, 4}, {44, 4}, {60, 4}, {4, 20}, {20, 44}, {60, 44}, {20, 60}, {4, 60}};

double road_half_width(int lanes) { return 1.0 + 2.0 * lanes; }

void osm_road(Canvas& c, const RoadLayout& road) {
  const double h = road_half_width(road.lanes);
  const Rgb outline{170, 170, 170}, fill{255, 255, 255}, stripe{120, 120, 120}, centre{230, 200, 90};
  if (road.north_south) {
    c.rect(32 - h - 1, 0, 32 + h + 1, 64, outline);
    c.rect(32 - h, 0, 32 + h, 64, fill);
    if (road.lanes >= 2) {
      for (double y = 0; y < 64; y += 4) c.rect(31.5, y, 32.5, y + 2, centre);
    }
    if (road.crossing) {
      for (double x = 32 - h; x < 32 + h; x += 2) c.rect(x, 44, x + 1, 48, stripe);
    }
  } else {
    c.rect(0, 32 - h - 1, 64, 32 + h + 1, outline);
    c.rect(0, 32 - h, 64, 32 + h, fill);
    if (road.lanes >= 2) {
      for (double x = 0; x < 64; x += 4) c.rect(x, 31.5, x + 2, 32.5, centre);
    }
    if (road.crossing) {
      for (double y = 32 - h; y < 32 + h; y += 2) c.rect(44, y, 48, y + 1, stripe);
    }
  }
}

// A 16x16 glyph aligned to the 8-unit grid: the upper two cells carry the
// name words (word / 5 over word % 5 from the code palette), the lower two
// cells the category colour with a white centre mark.
void osm_glyph(Canvas& c, const Poi& p) {
  const Slot s = poi_slot(p.direction);
  const auto word = [&](std::size_t w, double x) {
    c.rect(x, s.y, x + 8, s.y + 4, kCodeColor[w / 5]);
    c.rect(x, s.y + 4, x + 8, s.y + 8, kCodeColor[w % 5]);
  };
  word(p.first_word, s.x);
  word(p.second_word, s.x + 8);
  c.rect(s.x, s.y + 8, s.x + 16, s.y + 16, kCategoryColor[p.category]);
  c.rect(s.x + 6, s.y + 11, s.x + 10, s.y + 13, {255, 255, 255});
}

Raster render_osm(const SceneSpec& spec, std::size_t size) {
  Canvas c(size);
  c.rect(0, 0, 64, 64, {242, 239, 233});
  osm_road(c, spec.road);
  for (std::size_t t : spec.env.tree_slots) {
    c.disc(kTreeSlots[t].x, kTreeSlots[t].y, 3.5, {120, 170, 110});
    c.disc(kTreeSlots[t].x, kTreeSlots[t].y, 3.0, {173, 209, 158});
  }
  for (const auto& p : spec.pois) osm_glyph(c, p);
  return c.take();
}

Raster render_satellite(const SceneSpec& spec, std::size_t size) {
  Rng rng(spec.seed ^ 0x5a7e111eULL);
  Canvas c(size);
  for (int y = 0; y < 64; y += 4) {
    for (int x = 0; x < 64; x += 4) {
      const int d = static_cast<int>(rng.below(25)) - 12;
      c.rect(x, y, x + 4, y + 4, {105 + d, 100 + d, 88 + d});
    }
  }
  const auto& road = spec.road;
  const double h = road_half_width(road.lanes);
  const Rgb asphalt{70, 70, 72}, paint{205, 205, 200};
  if (road.north_south) {
    c.rect(32 - h, 0, 32 + h, 64, asphalt);
    for (int k = 1; k < road.lanes; ++k) {
      const double x = 32 - h + 2.0 * h * k / road.lanes;
      for (double y = 0; y < 64; y += 6) c.rect(x - 0.25, y, x + 0.25, y + 3, paint);
    }
    if (road.crossing) {
      for (double x = 32 - h; x < 32 + h; x += 2) c.rect(x, 44, x + 1, 48, paint);
    }
  } else {
    c.rect(0, 32 - h, 64, 32 + h, asphalt);
    for (int k = 1; k < road.lanes; ++k) {
      const double y = 32 - h + 2.0 * h * k / road.lanes;
      for (double x = 0; x < 64; x += 6) c.rect(x, y - 0.25, x + 3, y + 0.25, paint);
    }
    if (road.crossing) {
      for (double y = 32 - h; y < 32 + h; y += 2) c.rect(44, y, 48, y + 1, paint);
    }
  }
  for (std::size_t t : spec.env.tree_slots) c.disc(kTreeSlots[t].x, kTreeSlots[t].y, 3.5, {50, 90, 45});
  for (const auto& p : spec.pois) {
    const Slot s = poi_slot(p.direction);
    c.rect(s.x + 2, s.y + 2, s.x + 15, s.y + 15, {50, 50, 50});
    c.rect(s.x + 1, s.y + 1, s.x + 14, s.y + 14, kRoofColor[p.material]);
  }
  c.noise(0, 0, 64, 64, 15, rng);
  return c.take();
}

void facade_texture(Canvas& c, double x0, double x1, std::size_t material, Rgb base) {
  const Rgb dark{base[0] - 40, base[1] - 40, base[2] - 40};
  const Rgb light{base[0] + 40, base[1] + 40, base[2] + 40};
  switch (material) {
    case 0:  // brick
      for (double y = 21; y < 44; y += 3) c.rect(x0, y, x1, y + 0.75, dark);
      break;
    case 1:  // glass
      for (double y = 22; y < 42; y += 5) {
        for (double x = x0 + 1; x + 3 <= x1; x += 4) c.rect(x, y, x + 3, y + 4, light);
      }
      break;
    case 3:  // wood
      for (double x = x0; x < x1; x += 3) c.rect(x, 20, x + 0.75, 44, dark);
      break;
    case 4:  // stone
      for (double y = 22; y < 44; y += 6) {
        for (double x = x0 + ((static_cast<int>(y) / 6) % 2) * 3; x + 5 <= x1; x += 6) c.rect(x, y, x + 5, y + 5, dark);
      }
      break;
    case 5:  // metal
      for (double y = 21; y < 44; y += 4) c.rect(x0, y, x1, y + 1.5, light);
      break;
    default:  // concrete: plain
      break;
  }
}

// North-centred ground-level proxy: sky, four 16-unit facade segments in the
// order left, front, right, back, then the ground band.
Raster render_street(const SceneSpec& spec, std::size_t size) {
  Canvas c(size);
  c.rect(0, 0, 64, 16, kSkyColor[spec.env.sky]);
  const Direction order[] = {Direction::left, Direction::front, Direction::right, Direction::back};
  for (int seg = 0; seg < 4; ++seg) {
    const double x0 = 16.0 * seg, x1 = x0 + 16;
    const auto it = std::find_if(spec.pois.begin(), spec.pois.end(),
                                 [&](const Poi& p) { return p.direction == order[seg]; });
    if (it == spec.pois.end()) {
      c.rect(x0, 16, x1, 44, {165, 160, 155});
      for (double y = 22; y < 42; y += 6) c.rect(x0 + 3, y, x0 + 6, y + 3, {90, 90, 95});
      for (double y = 22; y < 42; y += 6) c.rect(x0 + 10, y, x0 + 13, y + 3, {90, 90, 95});
    } else {
      const Rgb base = kFacadeColor[it->color];
      c.rect(x0, 16, x1, 44, base);
      facade_texture(c, x0, x1, it->material, base);
      c.rect(x0, 16, x1, 20, kCategoryColor[it->category]);
    }
    c.rect(x0, 44, x1, 64, {190, 185, 175});
    const bool road_here = spec.road.north_south ? (order[seg] == Direction::front || order[seg] == Direction::back)
                                                 : (order[seg] == Direction::left || order[seg] == Direction::right);
    if (road_here) {
      const double cx = x0 + 8;
      for (int y = 44; y < 64; ++y) {
        const double hw = 1.0 + (2.0 * spec.road.lanes) * (y - 44) / 20.0;
        c.rect(cx - hw, y, cx + hw, y + 1, {70, 70, 72});
      }
      if (spec.road.crossing) {
        for (double y = 56; y < 60; y += 2) c.rect(cx - 6, y, cx + 6, y + 1, {220, 220, 220});
      }
    }
  }
  for (std::size_t t : spec.env.tree_slots) c.disc(4.0 + 7.5 * static_cast<double>(t), 41, 3, {50, 120, 50});
  return c.take();
}

}  // namespace

Raster render_raster(const SceneSpec& spec, TileKind kind, std::size_t size) {
  if (size == 0 || size % 64 != 0) throw ParameterError("render size must be a positive multiple of 64");
  switch (kind) {
    case TileKind::osm: return render_osm(spec, size);
    case TileKind::satellite: return render_satellite(spec, size);
    case TileKind::street: return render_street(spec, size);
  }
  return {};
}

geoindex::GeoTile render_tile(const SceneSpec& spec, geoindex::Modality modality, std::size_t output_size,
                              std::string id) {
  constexpr std::size_t kSourceSize = 512;
  if (output_size == 0 || kSourceSize % output_size != 0) {
    throw ParameterError("tile size " + std::to_string(output_size) + " must divide 512");
  }
  geoindex::GeoTile tile;
  tile.id = std::move(id);
  tile.modality = modality;
  tile.center = spec.location;
  tile.zoom = 20;
  const Raster full =
      render_raster(spec, modality == geoindex::Modality::osm ? TileKind::osm : TileKind::satellite, kSourceSize);
  tile.pixels = output_size == kSourceSize ? full : downsample(full, output_size);
  tile.poi_tags = spec.poi_tags();
  return tile;
}

}  // namespace cvloc::corpus
