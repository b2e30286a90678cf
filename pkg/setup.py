"""Build script for the optional compiled kernel core.

The package is fully functional without the extension: editlab.backend
falls back to the pure-numpy kernels when editlab.backend._fastops is
missing.  The extension exists to speed up the fused inner-loop kernels
(activations, row softmax losses, norm layers, attention) that dominate
edit-step time.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "editlab.backend._fastops",
                ["src/editlab/backend/_fastops.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
