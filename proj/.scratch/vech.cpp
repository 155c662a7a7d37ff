#include "fstk/nn.hpp"
template void fstk::detail::conv3_image<double>(const double*, const double*, const double*,
                                                double*, int, int, int, int, const double*);
template void fstk::detail::conv3_dw_image<double>(const double*, const double*, double*, int,
                                                   int, int, int, const double*);
