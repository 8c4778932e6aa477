from src.app.commands import cmd_decode, cmd_eval, cmd_gen_data, cmd_selfcheck, cmd_train
from src.utils.constants import EXIT_DATA_ERROR, EXIT_NUMERIC_FAILURE, EXIT_OK, EXIT_USAGE, LOG_FORMAT
from src.utils.errors import VlamdError
from typing import List, Optional
import argparse
import logging
import sys


def setup_logging():
    """
    Configures the root logger to write to the console. Commands that own a
    run directory add a file handler there.
    """
    logging.basicConfig(
        level=logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vlamd', description='Scene-text recognizer with mutual decoding')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help='render the synthetic IV/OOV dataset')
    gen.add_argument('--config', required=True)

    train = sub.add_parser('train', help='train a model')
    train.add_argument('--config', required=True)
    train.add_argument('--resume', help='checkpoint directory to continue from')

    ev = sub.add_parser('eval', help='compute CRW on a manifest')
    ev.add_argument('--ckpt', required=True)
    ev.add_argument('--data', required=True)
    ev.add_argument('--report', help='write per-sample results as TSV')

    dec = sub.add_parser('decode', help='recognize one image')
    dec.add_argument('--ckpt', required=True)
    dec.add_argument('--image', required=True)
    dec.add_argument('--nbest', type=int)
    dec.add_argument('--dump-candidates', action='store_true')

    sub.add_parser('selfcheck', help='run gradient and beam-search checks')
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == 'gen-data':
        train, evals = cmd_gen_data(args.config)
        print(f"train\t{len(train)}\neval\t{len(evals)}")
    elif args.command == 'train':
        print(cmd_train(args.config, args.resume))
    elif args.command == 'eval':
        report = cmd_eval(args.ckpt, args.data, args.report)
        print(f"crw_total\t{report.crw_total:.4f}\t{report.correct_total}/{report.n_total}")
        print(f"crw_iv\t{report.crw_iv:.4f}\t{report.correct_iv}/{report.n_iv}")
        print(f"crw_oov\t{report.crw_oov:.4f}\t{report.correct_oov}/{report.n_oov}")
    elif args.command == 'decode':
        text, report = cmd_decode(args.ckpt, args.image, args.nbest)
        print(text)
        if args.dump_candidates and report is not None:
            print('rank\torigin\ttext\tlogp_l2r\tlogp_r2l_reversed\tcombined')
            for row in report.rows():
                print('\t'.join(row))
    elif args.command == 'selfcheck':
        report = cmd_selfcheck()
        for line in report.lines():
            print(line)
        return EXIT_OK if report.passed else EXIT_NUMERIC_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    The main entry point of the application. Domain errors map to their
    exit codes; anything unexpected exits with 1.
    """
    setup_logging()
    logger = logging.getLogger(__name__)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        return run(args)
    except VlamdError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return EXIT_DATA_ERROR
    except Exception as e:
        logger.exception("An unhandled exception occurred: %s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
