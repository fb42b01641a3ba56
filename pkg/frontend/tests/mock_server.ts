/** In-memory stand-in for the review service: same endpoints, same re-grade
 * rules (pooled ratio, min-nuclei gate), byte-stable report serialization. */
import {
  NucleusWire,
  OverrideWire,
  ScoringConfigWire,
  SlideReportWire,
  StatusName,
  effectiveClass,
} from '../src/types.js';
import { FetchLike } from '../src/api.js';

export interface MockNucleusSpec {
  id: number;
  her2: number;
  cep17: number;
  cls?: 'Normal' | 'LowAmp' | 'HighAmp' | 'Artifact' | 'Background';
  discrepant?: boolean;
}

const DEFAULT_SCORING: ScoringConfigWire = {
  ratio_threshold: 2.0,
  high_amp_mean_her2_copies: 6.0,
  min_evaluable_nuclei: 20,
  cluster_copies_floor: 4,
  cluster_copies_cap: 20,
  include_discrepant: false,
};

function nucleusWire(spec: MockNucleusSpec): NucleusWire {
  const cls = spec.cls ?? 'Normal';
  const discrepant = spec.discrepant ?? false;
  const boxes = [];
  for (let i = 0; i < spec.her2; i++) {
    boxes.push({ class: 'HER2' as const, box: [10 + 12 * i, 10, 18 + 12 * i, 18] as [number, number, number, number], score: 0.9 });
  }
  for (let i = 0; i < spec.cep17; i++) {
    boxes.push({ class: 'CEP17' as const, box: [10 + 12 * i, 30, 18 + 12 * i, 38] as [number, number, number, number], score: 0.9 });
  }
  return {
    id: spec.id,
    polygon: { center: [40 + 90 * (spec.id % 5), 40 + 90 * Math.floor(spec.id / 5)], distances: Array(16).fill(30), score: 1.0 },
    crop_offset: [0, 0],
    crop_size: [80, 80],
    classifier: { source: 'rules', class: cls, rationale: 'graded from copies', probabilities: null },
    signals: boxes,
    signal_class: discrepant ? 'HighAmp' : cls,
    second_opinion:
      cls === 'Artifact' || cls === 'Background'
        ? null
        : { status: discrepant ? 'discrepant' : 'consistent', classes: [cls, discrepant ? 'HighAmp' : cls] },
    score: { her2_copies: spec.her2, cep17_copies: spec.cep17, ratio: spec.cep17 ? spec.her2 / spec.cep17 : null, evaluable: false, exclusion_reason: null },
    cam: null,
    cam_reason: 'reference classifier has no feature maps',
    override: null,
  };
}

export class MockServer {
  nuclei: NucleusWire[];
  scoring: ScoringConfigWire;
  patchCount = 0;
  lastReportText = '';
  private inFlight = 0;
  maxConcurrentMutations = 0;

  constructor(specs: MockNucleusSpec[], public slideId = 'mock-slide') {
    this.nuclei = specs.map(nucleusWire);
    this.scoring = { ...DEFAULT_SCORING };
  }

  private grade(): SlideReportWire {
    const gradable = new Set(['Normal', 'LowAmp', 'HighAmp']);
    const evaluable: NucleusWire[] = [];
    for (const n of this.nuclei) {
      const eff = effectiveClass(n);
      const consistent = n.second_opinion === null || n.second_opinion.status === 'consistent';
      let ok = gradable.has(eff) && n.score.cep17_copies >= 1 && (consistent || this.scoring.include_discrepant);
      if (n.override?.action === 'exclude') ok = false;
      if (n.override?.action === 'include' && gradable.has(eff) && n.score.cep17_copies >= 1) ok = true;
      n.score.evaluable = ok;
      n.score.exclusion_reason = ok ? null : 'excluded';
      if (ok) evaluable.push(n);
    }
    let status: StatusName;
    let meanRatio: number | null = null;
    let meanHer2: number | null = null;
    if (evaluable.length < this.scoring.min_evaluable_nuclei) {
      status = 'Indeterminate';
    } else {
      const sumHer2 = evaluable.reduce((a, n) => a + n.score.her2_copies, 0);
      const sumCep = evaluable.reduce((a, n) => a + n.score.cep17_copies, 0);
      meanRatio = sumHer2 / sumCep;
      meanHer2 = sumHer2 / evaluable.length;
      status = meanRatio < this.scoring.ratio_threshold ? 'Negative' : meanHer2 >= this.scoring.high_amp_mean_her2_copies ? 'PositiveHigh' : 'PositiveLow';
    }
    return {
      schema: 'fishgrade/1',
      tool_version: '0.1.0',
      created_at: '2026-08-11T00:00:00+00:00',
      slide: { width: 512, height: 512, input_sha256: this.slideId },
      config: { scoring: { ...this.scoring } },
      nuclei: this.nuclei,
      status: { status, evaluable_count: evaluable.length, mean_ratio: meanRatio, mean_her2_copies: meanHer2 },
      metrics: null,
    };
  }

  reportText(): string {
    this.lastReportText = JSON.stringify(this.grade(), null, 1) + '\n';
    return this.lastReportText;
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? 'GET';
    this.inFlight += 1;
    this.maxConcurrentMutations = Math.max(this.maxConcurrentMutations, method === 'GET' ? 0 : this.inFlight);
    // make mutations visibly asynchronous so rapid-fire ordering matters
    await new Promise((r) => setTimeout(r, method === 'GET' ? 0 : 5));
    try {
      const u = new URL(url, 'http://mock');
      const path = u.pathname;
      if (method === 'GET' && path === `/slides/${this.slideId}/report`) {
        return new Response(this.reportText(), { status: 200, headers: { 'content-type': 'application/json' } });
      }
      const patchMatch = path.match(new RegExp(`^/slides/${this.slideId}/nuclei/(\\d+)$`));
      if (method === 'PATCH' && patchMatch) {
        const nid = Number(patchMatch[1]);
        const n = this.nuclei.find((x) => x.id === nid);
        if (!n) return new Response(JSON.stringify({ detail: `unknown nucleus ${nid}` }), { status: 404 });
        const body = JSON.parse(String(init?.body));
        if (!['set_class', 'exclude', 'include'].includes(body.action)) {
          return new Response(JSON.stringify({ detail: 'unknown action' }), { status: 422 });
        }
        const override: OverrideWire = { action: body.action, by: 'reviewer', at: 'now' };
        if (body.action === 'set_class') {
          if (!['Artifact', 'Background', 'Normal', 'LowAmp', 'HighAmp'].includes(body.class)) {
            return new Response(JSON.stringify({ detail: 'invalid class' }), { status: 422 });
          }
          override.class = body.class;
        }
        n.override = override;
        this.patchCount += 1;
        return new Response(this.reportText(), { status: 200 });
      }
      if (method === 'PUT' && path === `/slides/${this.slideId}/config`) {
        this.scoring = { ...this.scoring, ...JSON.parse(String(init?.body)) };
        return new Response(this.reportText(), { status: 200 });
      }
      return new Response(JSON.stringify({ detail: 'unknown route' }), { status: 404 });
    } finally {
      this.inFlight -= 1;
    }
  };
}

export function twentyNormalNuclei(): MockNucleusSpec[] {
  // pooled ratio 1.5 (3 HER2 / 2 CEP17 each), 20 evaluable = exactly the gate
  return Array.from({ length: 20 }, (_, i) => ({ id: i, her2: 3, cep17: 2 }));
}
