"""Builds the native extension with cargo and ships it inside the pure
Python ``glr`` package. Works with ``pip install -e . --no-build-isolation``
(the copy lands in the source tree, where the editable finder sees it)
as well as regular wheel builds (the copy lands in build_lib)."""

import shutil
import subprocess
import sysconfig
from pathlib import Path

from setuptools import setup
from setuptools.command.build_py import build_py

HERE = Path(__file__).resolve().parent
WORKSPACE = HERE.parent
# Plain .so is always in EXTENSION_SUFFIXES on POSIX; fall back to the
# interpreter-specific suffix elsewhere.
SUFFIX = ".so" if sysconfig.get_platform().startswith(("linux", "macos")) else (
    sysconfig.get_config_var("EXT_SUFFIX") or ".so"
)
MODULE = f"_native{SUFFIX}"


class CargoBuild(build_py):
    def run(self):
        subprocess.run(
            [
                "cargo", "build", "--release", "-p", "glr-python",
                "--features", "extension-module",
            ],
            check=True,
            cwd=WORKSPACE,
        )
        built = WORKSPACE / "target" / "release" / "libglr.so"
        shutil.copy2(built, HERE / "glr" / MODULE)
        super().run()
        wheel_copy = Path(self.build_lib) / "glr" / MODULE
        wheel_copy.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, wheel_copy)


setup(cmdclass={"build_py": CargoBuild})
