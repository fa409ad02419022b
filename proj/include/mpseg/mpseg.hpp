#pragma once

#include "mpseg/error.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/volume.hpp"
#include "mpseg/adc_fit.hpp"
#include "mpseg/nifti.hpp"
#include "mpseg/data.hpp"
#include "mpseg/sampling.hpp"
#include "mpseg/architectures.hpp"
#include "mpseg/losses.hpp"
#include "mpseg/optim.hpp"
#include "mpseg/training.hpp"
#include "mpseg/inference.hpp"
#include "mpseg/metrics.hpp"
#include "mpseg/explain.hpp"
#include "mpseg/phantom.hpp"
