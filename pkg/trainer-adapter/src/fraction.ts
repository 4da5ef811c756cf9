/** Exact rational arithmetic over BigInt, mirroring Python's Fraction.
 *
 * Values on the wire stay small (grid positions, mixture weights), so
 * numerator/denominator always fit a double exactly and toNumber() is the
 * correctly rounded quotient.
 */

function gcd(a: bigint, b: bigint): bigint {
  a = a < 0n ? -a : a;
  b = b < 0n ? -b : b;
  while (b) {
    [a, b] = [b, a % b];
  }
  return a;
}

export class Fraction {
  readonly p: bigint;
  readonly q: bigint;

  constructor(p: bigint, q: bigint = 1n) {
    if (q === 0n) throw new Error("zero denominator");
    if (q < 0n) {
      p = -p;
      q = -q;
    }
    const g = gcd(p, q) || 1n;
    this.p = p / g;
    this.q = q / g;
  }

  static zero(): Fraction {
    return new Fraction(0n);
  }

  static fromInt(n: number): Fraction {
    return new Fraction(BigInt(n));
  }

  /** Parse "p/q", an integer string, or a decimal string (with optional
   * exponent) into an exact rational. */
  static parse(s: string): Fraction {
    s = s.trim();
    if (s.includes("/")) {
      const [p, q] = s.split("/", 2);
      return new Fraction(BigInt(p), BigInt(q));
    }
    const m = /^([+-]?)(\d+)(?:\.(\d*))?(?:[eE]([+-]?\d+))?$/.exec(s);
    if (!m) throw new Error(`cannot parse fraction ${JSON.stringify(s)}`);
    const sign = m[1] === "-" ? -1n : 1n;
    const frac = m[3] ?? "";
    let p = BigInt(m[2] + frac) * sign;
    let q = 10n ** BigInt(frac.length);
    const exp = m[4] ? parseInt(m[4], 10) : 0;
    if (exp > 0) p *= 10n ** BigInt(exp);
    else if (exp < 0) q *= 10n ** BigInt(-exp);
    return new Fraction(p, q);
  }

  add(o: Fraction): Fraction {
    return new Fraction(this.p * o.q + o.p * this.q, this.q * o.q);
  }

  sub(o: Fraction): Fraction {
    return new Fraction(this.p * o.q - o.p * this.q, this.q * o.q);
  }

  mul(o: Fraction): Fraction {
    return new Fraction(this.p * o.p, this.q * o.q);
  }

  div(o: Fraction): Fraction {
    if (o.p === 0n) throw new Error("division by zero");
    return new Fraction(this.p * o.q, this.q * o.p);
  }

  abs(): Fraction {
    return this.p < 0n ? new Fraction(-this.p, this.q) : this;
  }

  cmp(o: Fraction): number {
    const left = this.p * o.q;
    const right = o.p * this.q;
    return left < right ? -1 : left > right ? 1 : 0;
  }

  lte(o: Fraction): boolean {
    return this.cmp(o) <= 0;
  }

  gt(o: Fraction): boolean {
    return this.cmp(o) > 0;
  }

  isZero(): boolean {
    return this.p === 0n;
  }

  /** `p` or `p/q` in lowest terms, exactly like Python's str(Fraction). */
  toString(): string {
    return this.q === 1n ? this.p.toString() : `${this.p}/${this.q}`;
  }

  toNumber(): number {
    return Number(this.p) / Number(this.q);
  }

  /** Remainder of this modulo o (both treated as rationals). */
  mod(o: Fraction): Fraction {
    const quotient = this.p * o.q / (o.p * this.q);
    return this.sub(o.mul(new Fraction(quotient)));
  }
}
