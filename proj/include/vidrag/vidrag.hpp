#pragma once

// Umbrella header. Live HTTP adapters are in providers_http.hpp and are not
// pulled in here.

#include "vidrag/common.hpp"
#include "vidrag/dnc_engine.hpp"
#include "vidrag/eval.hpp"
#include "vidrag/knowledge_store.hpp"
#include "vidrag/media.hpp"
#include "vidrag/providers.hpp"
#include "vidrag/query_engine.hpp"
#include "vidrag/task_tree.hpp"
#include "vidrag/toolbox.hpp"
#include "vidrag/trace.hpp"
#include "vidrag/video2rag.hpp"
