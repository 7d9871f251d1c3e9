#pragma once

#include "cbscore/align.hpp"
#include "cbscore/backend.hpp"
#include "cbscore/error.hpp"
#include "cbscore/http_backend.hpp"
#include "cbscore/lexicon.hpp"
#include "cbscore/metrics.hpp"
#include "cbscore/mock_backend.hpp"
#include "cbscore/prob.hpp"
#include "cbscore/table_backend.hpp"
