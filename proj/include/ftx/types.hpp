#pragma once

namespace ftx {

// Token IDs are 1-based: ordinary tokens occupy 1..N_V-3 and the special
// tokens (mask, bos, eos) the top three IDs of the vocabulary.
using TokenId = int;

}  // namespace ftx
