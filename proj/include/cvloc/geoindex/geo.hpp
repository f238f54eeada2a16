#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cvloc/util/raster.hpp"

namespace cvloc::geoindex {

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kMercatorMaxLat = 85.051129;

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

// Great-circle distance in meters on a sphere of radius kEarthRadiusM.
double haversine(LatLon a, LatLon b);

// Meters per pixel of a 256-pixel-base Web-Mercator tile pyramid.
double ground_resolution(double lat, int zoom);

enum class Modality { osm, satellite };

std::string modality_name(Modality m);
Modality parse_modality(std::string_view name);

struct GeoTile {
  std::string id;
  Modality modality = Modality::osm;
  LatLon center;
  int zoom = 20;
  Raster pixels;
  std::vector<std::string> poi_tags;

  // Throws ParameterError outside the Mercator band, DimensionError for non-square rasters.
  void validate() const;
};

}  // namespace cvloc::geoindex
