"""Reference MUT speaking the line-delimited protocol on stdin/stdout.

Answers with the built-in models, so a campaign through this process
matches one run against the built-ins directly::

    python -m fairgram.reference_mut --plant plant.json
"""

import argparse
import json
import sys

from .mut import LexiconSA, TableMLM, ToyCoref, decode_request, encode_response
from .mut import MUTError


def main(argv=None):
    ap = argparse.ArgumentParser(prog="fairgram.reference_mut")
    ap.add_argument("--plant", help="JSON file or inline JSON with token flip probabilities")
    ap.add_argument("--table", help="JSON file or inline JSON with MLM probe confidences")
    ap.add_argument("--crash-after", type=int, default=0, help="exit(3) after N requests")
    ap.add_argument("--hang-on", default=None, help="never answer requests containing this text")
    args = ap.parse_args(argv)

    def load(v):
        if v is None:
            return None
        v = v.strip()
        return json.loads(v) if v.startswith("{") else json.load(open(v))

    models = {
        "sa": LexiconSA(load(args.plant)),
        "coref": ToyCoref(load(args.plant)),
        "mlm": TableMLM(load(args.table)),
    }
    served = 0
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = decode_request(line)
        except MUTError as exc:
            print(json.dumps({"id": None, "error": str(exc)}), flush=True)
            continue
        served += 1
        if args.crash_after and served > args.crash_after:
            sys.exit(3)
        if args.hang_on and args.hang_on in req["text"]:
            continue
        out = models[req["task"]].evaluate(req["text"])
        print(encode_response(req["id"], out), flush=True)


if __name__ == "__main__":
    main()
