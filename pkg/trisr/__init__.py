import logging
import os

from rich.logging import RichHandler

from trisr.config import settings

# BLAS pools size themselves at import; pin them before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, str(settings.THREADS))

FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
logging.basicConfig(level=settings.LOG_LEVEL, format=FORMAT, handlers=[RichHandler()])
logging.getLogger("PIL").setLevel(logging.WARNING)

logger = logging.getLogger("trisr")
