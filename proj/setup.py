"""Builds the compiled module through the project's CMake configuration."""

import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        source = Path(__file__).resolve().parent
        build = Path(self.build_temp).resolve() / "cmake"
        # install prefix such that the declared `espattn/` destination lands
        # exactly where setuptools expects the extension file
        prefix = Path(self.get_ext_fullpath(ext.name)).resolve().parent.parent
        cfg = "Debug" if self.debug else "Release"
        subprocess.run(
            [
                "cmake", "-S", str(source), "-B", str(build),
                f"-DCMAKE_BUILD_TYPE={cfg}",
                "-DESPATTN_WHEEL=ON",  # module + install rules, no tests
                f"-DPython3_EXECUTABLE={sys.executable}",
            ],
            check=True,
        )
        subprocess.run(
            ["cmake", "--build", str(build), "--target", "_espattn", "--parallel", "2"],
            check=True,
        )
        subprocess.run(["cmake", "--install", str(build), "--prefix", str(prefix)], check=True)


setup(
    ext_modules=[CMakeExtension("espattn._espattn")],
    cmdclass={"build_ext": CMakeBuild},
)
