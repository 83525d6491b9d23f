import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "anytimeid._searchcore",
                sources=["src/anytimeid/_searchcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # keep float results identical to the pure-Python mirror
                extra_compile_args=["-ffp-contract=off"] + (["-fsanitize=address","-g","-O1"] if __import__("os").environ.get("ASAN") else []),
                extra_link_args=(["-fsanitize=address"] if __import__("os").environ.get("ASAN") else []),
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
