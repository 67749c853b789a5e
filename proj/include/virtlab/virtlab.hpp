#pragma once

// Umbrella header: the whole library except the network service.

#include "virtlab/config.hpp"
#include "virtlab/dsp.hpp"
#include "virtlab/engine.hpp"
#include "virtlab/error.hpp"
#include "virtlab/fit.hpp"
#include "virtlab/instruments.hpp"
#include "virtlab/optics.hpp"
#include "virtlab/protocols.hpp"
#include "virtlab/record.hpp"
#include "virtlab/rng.hpp"
#include "virtlab/sequence.hpp"
#include "virtlab/spin_model.hpp"
#include "virtlab/units.hpp"
#include "virtlab/vec3.hpp"
