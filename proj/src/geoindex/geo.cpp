#include "cvloc/geoindex/geo.hpp"

#include <cmath>
#include <numbers>

#include "cvloc/errors.hpp"

namespace cvloc::geoindex {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace

double haversine(LatLon a, LatLon b) {
  const double dlat = radians(b.lat - a.lat);
  const double dlon = radians(b.lon - a.lon);
  const double s = std::sin(dlat / 2);
  const double t = std::sin(dlon / 2);
  const double h = s * s + std::cos(radians(a.lat)) * std::cos(radians(b.lat)) * t * t;
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(std::min(1.0, h)));
}

double ground_resolution(double lat, int zoom) {
  if (!(std::abs(lat) <= kMercatorMaxLat)) {
    throw ParameterError("latitude " + std::to_string(lat) + " outside the Mercator band");
  }
  if (zoom < 0) throw ParameterError("zoom must be non-negative");
  return 156543.03392 * std::cos(radians(lat)) / std::ldexp(1.0, zoom);
}

std::string modality_name(Modality m) { return m == Modality::osm ? "osm" : "satellite"; }

Modality parse_modality(std::string_view name) {
  if (name == "osm") return Modality::osm;
  if (name == "satellite" || name == "sat") return Modality::satellite;
  throw ParameterError("unknown modality '" + std::string(name) + "' (expected osm or satellite)");
}

void GeoTile::validate() const {
  if (!(std::abs(center.lat) <= kMercatorMaxLat)) {
    throw ParameterError("tile " + id + " latitude outside the Mercator band");
  }
  if (pixels.width != pixels.height) {
    throw DimensionError("tile " + id + " raster is " + std::to_string(pixels.width) + "x" +
                         std::to_string(pixels.height) + ", expected square");
  }
}

}  // namespace cvloc::geoindex
