import logging
import os

from dotenv import load_dotenv

from vbtta.benchcli import main


def run():
    load_dotenv()  # VBTTA_SEED and LOG_LEVEL may come from a local .env
    logging.basicConfig(level=os.getenv("LOG_LEVEL", "INFO").upper())
    main(prog_name="vbtta")


if __name__ == "__main__":
    run()
