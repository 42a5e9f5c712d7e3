import sys
from pathlib import Path

# make fd_oracle and friends importable when running from the repo root
sys.path.insert(0, str(Path(__file__).parent))
