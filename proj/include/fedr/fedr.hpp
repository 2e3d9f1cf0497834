#pragma once

#include "fedr/error.hpp"
#include "fedr/logistic.hpp"
#include "fedr/rng.hpp"
#include "fedr/panel.hpp"
#include "fedr/twoway.hpp"
#include "fedr/newton.hpp"
#include "fedr/fe_logit.hpp"
#include "fedr/projections.hpp"
#include "fedr/bias_correction.hpp"
#include "fedr/parallel.hpp"
#include "fedr/inference.hpp"
#include "fedr/quantile_effects.hpp"
#include "fedr/poisson.hpp"
#include "fedr/pipeline.hpp"
#include "fedr/mc.hpp"
#include "fedr/io.hpp"
#include "fedr/run_config.hpp"
#include "fedr/verify.hpp"
