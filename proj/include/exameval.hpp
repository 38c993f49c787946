#pragma once

// Umbrella header.
#include "exameval/error.hpp"
#include "exameval/decimal.hpp"
#include "exameval/rng.hpp"
#include "exameval/io.hpp"
#include "exameval/parallel.hpp"
#include "exameval/benchcore.hpp"
#include "exameval/llmgate.hpp"
#include "exameval/answering.hpp"
#include "exameval/grading.hpp"
#include "exameval/scorebook.hpp"
#include "exameval/statlab.hpp"
#include "exameval/raterstudy.hpp"
#include "exameval/fountain.hpp"
#include "exameval/report.hpp"
#include "exameval/manifest.hpp"
