#pragma once

// Umbrella header.

#include "radiance/autograd.hpp"
#include "radiance/checkpoint.hpp"
#include "radiance/cvae.hpp"
#include "radiance/equivariant.hpp"
#include "radiance/geometry.hpp"
#include "radiance/ldm.hpp"
#include "radiance/metrics.hpp"
#include "radiance/molgraph.hpp"
#include "radiance/nn.hpp"
#include "radiance/pipeline.hpp"
#include "radiance/retrievaldb.hpp"
#include "radiance/rng.hpp"
#include "radiance/vocab.hpp"
