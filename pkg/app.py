# app.py
import sys

from dotenv import load_dotenv

# PROTOPATCH_SEED / PROTOPATCH_LOG_LEVEL may come from a local .env
load_dotenv()

from ui.cli import dispatch  # noqa: E402

if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
