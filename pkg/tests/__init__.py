import pathlib
import sys

# Flat layout: the checkout itself is the package. Its parent goes on the
# path so the tests' relative imports resolve without an editable install.
PACKAGE_PARENT = pathlib.Path(__file__).resolve().parent.parent.parent
if str(PACKAGE_PARENT) not in sys.path:
    sys.path.insert(0, str(PACKAGE_PARENT))
