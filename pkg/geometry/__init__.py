from .grid import (DOMAIN, EDGES, TARGET_CASES, Grid, Region, RegionMap, SourceCapField,
                   build_grid, classify_regions, label_points, source_cap)
