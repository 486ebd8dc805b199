#pragma once

#include "geovec/error.hpp"
#include "geovec/hash.hpp"
#include "geovec/geo_core.hpp"
#include "geovec/transport.hpp"
#include "geovec/osm.hpp"
#include "geovec/prompt.hpp"
#include "geovec/embedding.hpp"
#include "geovec/geo_predict.hpp"
#include "geovec/dataio.hpp"
#include "geovec/forecast.hpp"
#include "geovec/synthetic.hpp"
