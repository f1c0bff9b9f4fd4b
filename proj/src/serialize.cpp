#include "xrec/serialize.hpp"

// Header-only helpers; this translation unit anchors the module in the
// library so dependents always link the same implementation.
namespace xrec {}
