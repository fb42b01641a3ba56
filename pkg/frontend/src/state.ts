import { ApiClient } from './api.js';
import {
  NucleusWire,
  OverrideAction,
  ScoringConfigWire,
  SlideReportWire,
  StatusName,
} from './types.js';

export interface LayerVisibility {
  nuclei: boolean;
  signals: boolean;
  cam: boolean;
}

export interface PendingEdit {
  nucleusId: number;
  action: OverrideAction;
  className?: string;
}

/**
 * Client view state. The status banner is never computed locally: it always
 * mirrors the last server-acknowledged report, and pending edits are tracked
 * separately so the UI can draw them as provisional.
 */
export interface ViewState {
  slideId: string;
  report: SlideReportWire | null;
  layers: LayerVisibility;
  selectedNucleus: number | null;
  pending: PendingEdit | null;
  sliders: ScoringConfigWire | null; // live slider values (uncommitted)
  banner: StatusName | 'Loading';
  toast: string | null;
}

export function initialState(slideId: string): ViewState {
  return {
    slideId,
    report: null,
    layers: { nuclei: true, signals: true, cam: false },
    selectedNucleus: null,
    pending: null,
    sliders: null,
    banner: 'Loading',
    toast: null,
  };
}

export function acknowledgeReport(state: ViewState, report: SlideReportWire): ViewState {
  return {
    ...state,
    report,
    banner: report.status.status,
    pending: null,
    sliders: state.sliders ?? { ...report.config.scoring },
  };
}

export function selectNucleus(state: ViewState, nucleusId: number | null): ViewState {
  if (nucleusId !== null && state.report && !state.report.nuclei.some((n) => n.id === nucleusId)) {
    return state;
  }
  return { ...state, selectedNucleus: nucleusId };
}

export function toggleLayer(state: ViewState, layer: keyof LayerVisibility): ViewState {
  return { ...state, layers: { ...state.layers, [layer]: !state.layers[layer] } };
}

export function moveSlider(state: ViewState, field: keyof ScoringConfigWire, value: number | boolean): ViewState {
  if (!state.sliders) return state;
  return { ...state, sliders: { ...state.sliders, [field]: value } };
}

export function findNucleus(report: SlideReportWire, nucleusId: number): NucleusWire | undefined {
  return report.nuclei.find((n) => n.id === nucleusId);
}

/** Hit test in slide coordinates: nearest polygon whose radial boundary
 * contains the point (star polygons are radial in their center). */
export function hitTestNucleus(report: SlideReportWire, x: number, y: number): number | null {
  for (const n of report.nuclei) {
    const [cx, cy] = n.polygon.center;
    const dx = x - cx;
    const dy = y - cy;
    const rho = Math.hypot(dx, dy);
    const k = n.polygon.distances.length;
    let phi = Math.atan2(dy, dx);
    if (phi < 0) phi += 2 * Math.PI;
    const idx = Math.floor((phi / (2 * Math.PI)) * k) % k;
    // boundary radius between ray idx and idx+1, linearly interpolated
    const d0 = n.polygon.distances[idx];
    const d1 = n.polygon.distances[(idx + 1) % k];
    const frac = (phi / (2 * Math.PI)) * k - idx;
    const boundary = d0 * (1 - frac) + d1 * frac;
    if (rho <= boundary) return n.id;
  }
  return null;
}

/**
 * Store: owns the state, serializes mutations (at most one in flight), and
 * applies only server-acknowledged reports. Grading never happens locally.
 */
export class Store {
  state: ViewState;
  private queue: Promise<unknown> = Promise.resolve();
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(private api: ApiClient, slideId: string) {
    this.state = initialState(slideId);
  }

  onChange(fn: (s: ViewState) => void): void {
    this.listeners.push(fn);
  }

  private set(next: ViewState): void {
    this.state = next;
    for (const fn of this.listeners) fn(next);
  }

  /** Serialize mutations: each waits for the previous acknowledgement. */
  private enqueue<T>(job: () => Promise<T>): Promise<T> {
    const next = this.queue.then(job, job);
    this.queue = next.catch(() => undefined);
    return next;
  }

  async refresh(): Promise<boolean> {
    const result = await this.api.getReport(this.state.slideId);
    if (result.ready && result.report) {
      this.set(acknowledgeReport(this.state, result.report));
      return true;
    }
    return false;
  }

  select(nucleusId: number | null): void {
    this.set(selectNucleus(this.state, nucleusId));
  }

  toggle(layer: keyof LayerVisibility): void {
    this.set(toggleLayer(this.state, layer));
  }

  slide(field: keyof ScoringConfigWire, value: number | boolean): void {
    this.set(moveSlider(this.state, field, value));
  }

  applyOverride(nucleusId: number, action: OverrideAction, className?: string): Promise<void> {
    // immediate visual feedback; acknowledged or rolled back by the queued job
    this.set({ ...this.state, pending: { nucleusId, action, className }, toast: null });
    return this.enqueue(async () => {
      const before = this.state;
      this.set({ ...before, pending: { nucleusId, action, className }, toast: null });
      try {
        const report = await this.api.overrideNucleus(this.state.slideId, nucleusId, action, className);
        this.set(acknowledgeReport(this.state, report));
      } catch (err) {
        // restore the pre-mutation view with an error toast
        this.set({ ...before, pending: null, toast: `override failed: ${(err as Error).message}` });
      }
    });
  }

  commitThresholds(): Promise<void> {
    return this.enqueue(async () => {
      const before = this.state;
      if (!before.sliders) return;
      try {
        const report = await this.api.updateConfig(before.slideId, before.sliders);
        this.set(acknowledgeReport(this.state, report));
      } catch (err) {
        this.set({ ...before, toast: `threshold update failed: ${(err as Error).message}` });
      }
    });
  }

  resetThresholds(): Promise<void> {
    if (this.state.report) {
      this.set({ ...this.state, sliders: { ...this.state.report.config.scoring } });
    }
    return this.commitThresholds();
  }

  /** Exact server bytes; the caller hands them to a download anchor. */
  exportReport(): Promise<Uint8Array> {
    return this.api.exportReportBytes(this.state.slideId);
  }
}
