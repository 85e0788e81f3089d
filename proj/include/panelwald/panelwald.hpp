#pragma once

#include "panelwald/closed_form.hpp"
#include "panelwald/distributions.hpp"
#include "panelwald/errors.hpp"
#include "panelwald/estimator.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/model_matrices.hpp"
#include "panelwald/parallel.hpp"
#include "panelwald/report.hpp"
#include "panelwald/rng.hpp"
#include "panelwald/scenarios.hpp"
#include "panelwald/score_wald.hpp"
#include "panelwald/simulator.hpp"
#include "panelwald/twoslw.hpp"
